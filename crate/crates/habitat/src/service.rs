//! HTTP inference service: top-3 classification of uploaded photos and
//! consent-gated feedback logging.
//!
//! The checkpoint is loaded once and shared read-only. Uploaded files are
//! kept in a session area keyed by a server-assigned image id until
//! feedback arrives or the session expires.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, SecondsFormat, Utc};
use habitat_core::metrics::{rank_labels, TOP_K};
use habitat_core::preprocess::{preprocess_eval, PreprocessConfig};
use habitat_core::ClassTaxonomy;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use crate::checkpoint::{load_checkpoint, CheckpointMeta};
use crate::error::{HabitatError, IoContext, Result};
use crate::imaging::{decode_image, has_supported_extension, SUPPORTED_EXTENSIONS};
use crate::model::Classifier;

pub const FEEDBACK_CSV: &str = "feedback.csv";
pub const FEEDBACK_JSONL: &str = "feedback.jsonl";
pub const FEEDBACK_CSV_HEADER: &str =
    "timestamp,image_id,predicted_label,verdict,corrected_label,custom_label,confidence_shown,consent";

/// Most files accepted in one upload.
pub const MAX_FILES_PER_REQUEST: usize = 32;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Temporary home of uploads awaiting feedback.
    pub upload_dir: PathBuf,
    /// Uploads whose owners consented to storage.
    pub retention_dir: PathBuf,
    /// Feedback CSV and JSON-lines logs.
    pub log_dir: PathBuf,
    pub max_file_bytes: usize,
    pub session_ttl: Duration,
    pub rotate_bytes: u64,
    /// When set, every endpoint but `/health` requires `Authorization: Bearer <token>`.
    pub auth_token: Option<String>,
}

impl ServiceConfig {
    pub const DEFAULT_MAX_FILE_BYTES: usize = 20 * 1024 * 1024;
    pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(3600);
    pub const DEFAULT_ROTATE_BYTES: u64 = 50 * 1024 * 1024;

    /// Default limits with every directory under `root`.
    pub fn under(root: &Path) -> Self {
        Self {
            upload_dir: root.join("uploads"),
            retention_dir: root.join("retained"),
            log_dir: root.join("feedback"),
            max_file_bytes: Self::DEFAULT_MAX_FILE_BYTES,
            session_ttl: Self::DEFAULT_SESSION_TTL,
            rotate_bytes: Self::DEFAULT_ROTATE_BYTES,
            auth_token: None,
        }
    }
}

/// A checkpoint ready for inference.
#[derive(Debug)]
pub struct LoadedModel {
    pub classifier: Classifier,
    pub meta: CheckpointMeta,
    pub preprocess: PreprocessConfig,
}

impl LoadedModel {
    pub fn from_checkpoint(path: &Path, taxonomy: &ClassTaxonomy) -> Result<Self> {
        let (classifier, meta) = load_checkpoint(path, Some(taxonomy))?;
        Ok(Self::new(classifier, meta))
    }

    pub fn new(classifier: Classifier, meta: CheckpointMeta) -> Self {
        let preprocess = PreprocessConfig {
            target_size: classifier.config().input_size,
            ..Default::default()
        };
        Self {
            classifier,
            meta,
            preprocess,
        }
    }
}

#[derive(Debug, Clone)]
struct Session {
    file: PathBuf,
    predicted_label: String,
    created: Instant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Confirm,
    Correct,
    Custom,
}

/// One logged feedback entry. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub timestamp: DateTime<Utc>,
    pub image_id: String,
    pub predicted_label: String,
    pub verdict: Verdict,
    pub corrected_label: Option<String>,
    pub custom_label: Option<String>,
    pub confidence_shown: f64,
    pub consent: bool,
}

/// Appends feedback to a CSV and a JSON-lines log kept in step, rotating
/// both once either reaches the size limit.
#[derive(Debug)]
pub struct FeedbackLog {
    dir: PathBuf,
    rotate_bytes: u64,
}

fn file_len(path: &Path) -> u64 {
    std::fs::metadata(path).map_or(0, |m| m.len())
}

impl FeedbackLog {
    pub fn new(dir: &Path, rotate_bytes: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).at(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            rotate_bytes,
        })
    }

    pub fn csv_path(&self) -> PathBuf {
        self.dir.join(FEEDBACK_CSV)
    }

    pub fn jsonl_path(&self) -> PathBuf {
        self.dir.join(FEEDBACK_JSONL)
    }

    fn next_suffix(&self) -> Result<u64> {
        let mut max = 0;
        for entry in std::fs::read_dir(&self.dir).at(&self.dir)? {
            let name = entry.at(&self.dir)?.file_name();
            let name = name.to_string_lossy();
            for base in [FEEDBACK_CSV, FEEDBACK_JSONL] {
                if let Some(n) = name
                    .strip_prefix(base)
                    .and_then(|s| s.strip_prefix('.'))
                    .and_then(|s| s.parse::<u64>().ok())
                {
                    max = max.max(n);
                }
            }
        }
        Ok(max + 1)
    }

    fn rotate_if_needed(&self) -> Result<()> {
        let (csv, jsonl) = (self.csv_path(), self.jsonl_path());
        if file_len(&csv) < self.rotate_bytes && file_len(&jsonl) < self.rotate_bytes {
            return Ok(());
        }
        let n = self.next_suffix()?;
        for p in [csv, jsonl] {
            if p.exists() {
                let target = PathBuf::from(format!("{}.{n}", p.display()));
                std::fs::rename(&p, &target).at(&p)?;
            }
        }
        Ok(())
    }

    pub fn append(&self, record: &FeedbackRecord) -> Result<()> {
        self.rotate_if_needed()?;
        let csv_path = self.csv_path();
        let mut row = Vec::new();
        if file_len(&csv_path) == 0 {
            row.extend_from_slice(FEEDBACK_CSV_HEADER.as_bytes());
            row.push(b'\n');
        }
        {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut row);
            w.write_record([
                record.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
                record.image_id.clone(),
                record.predicted_label.clone(),
                serde_json::to_value(record.verdict)?.as_str().unwrap_or_default().to_string(),
                record.corrected_label.clone().unwrap_or_default(),
                record.custom_label.clone().unwrap_or_default(),
                record.confidence_shown.to_string(),
                record.consent.to_string(),
            ])?;
            w.flush().at(&csv_path)?;
        }
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let jsonl_path = self.jsonl_path();
        let open = |p: &Path| OpenOptions::new().create(true).append(true).open(p).at(p);
        open(&csv_path)?.write_all(&row).at(&csv_path)?;
        open(&jsonl_path)?.write_all(&line).at(&jsonl_path)?;
        Ok(())
    }
}

pub struct AppState {
    model: Option<LoadedModel>,
    taxonomy: ClassTaxonomy,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Session>>,
    feedback: Mutex<FeedbackLog>,
    started: Instant,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, taxonomy: ClassTaxonomy, config: ServiceConfig) -> Result<Self> {
        if let Some(m) = &model {
            m.meta.check_compatible(&taxonomy)?;
        }
        for dir in [&config.upload_dir, &config.retention_dir] {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        let feedback = FeedbackLog::new(&config.log_dir, config.rotate_bytes)?;
        Ok(Self {
            model,
            taxonomy,
            config,
            sessions: Mutex::new(HashMap::new()),
            feedback: Mutex::new(feedback),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Drops expired sessions and deletes their uploads.
    pub fn purge_expired(&self) {
        let ttl = self.config.session_ttl;
        let expired: Vec<Session> = {
            let mut sessions = self.sessions.lock().expect("session lock");
            let ids: Vec<String> = sessions
                .iter()
                .filter(|(_, s)| s.created.elapsed() >= ttl)
                .map(|(id, _)| id.clone())
                .collect();
            ids.iter().filter_map(|id| sessions.remove(id)).collect()
        };
        for s in expired {
            let _ = std::fs::remove_file(&s.file);
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }
}

/// JSON error body with an HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<HabitatError> for ApiError {
    fn from(e: HabitatError) -> Self {
        tracing::error!(error = %e, "request failed");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub abbreviation: String,
    pub name: String,
    pub definition: String,
    /// Softmax probability at full precision.
    pub probability: f64,
    /// `probability` rounded to 4 decimal places, for display.
    pub probability_display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub image_id: String,
    pub filename: String,
    pub model_version: String,
    pub top3: Vec<RankedClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub abbreviation: String,
    pub name: String,
    pub definition: String,
}

struct Upload {
    filename: String,
    extension: String,
    bytes: Bytes,
}

async fn read_uploads(state: &AppState, mut multipart: Multipart) -> std::result::Result<Vec<Upload>, ApiError> {
    let limit = state.config.max_file_bytes;
    let mut uploads = Vec::new();
    while let Some(mut field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    {
        let Some(filename) = field.file_name().map(str::to_string) else {
            continue;
        };
        if !has_supported_extension(&filename) {
            return Err(ApiError {
                status: StatusCode::UNSUPPORTED_MEDIA_TYPE,
                body: json!({
                    "error": format!("unsupported file type: {filename}"),
                    "supported_formats": SUPPORTED_EXTENSIONS,
                }),
            });
        }
        if uploads.len() == MAX_FILES_PER_REQUEST {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!("at most {MAX_FILES_PER_REQUEST} files per request"),
            ));
        }
        let mut data = Vec::new();
        while let Some(chunk) = field
            .chunk()
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
        {
            if data.len() + chunk.len() > limit {
                return Err(ApiError::new(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!("{filename} exceeds the {limit}-byte upload limit"),
                ));
            }
            data.extend_from_slice(&chunk);
        }
        let extension = Path::new(&filename)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        uploads.push(Upload {
            filename,
            extension,
            bytes: Bytes::from(data),
        });
    }
    if uploads.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "no image files in the upload"));
    }
    Ok(uploads)
}

/// Probabilities for each upload, in order. Fails with 422 naming the
/// first file that cannot be decoded.
fn classify(model: &LoadedModel, uploads: &[Upload]) -> std::result::Result<Vec<Vec<f64>>, ApiError> {
    let tensors = uploads
        .iter()
        .map(|u| {
            let raster = decode_image(&u.bytes, &u.filename).map_err(|e| {
                ApiError {
                    status: StatusCode::UNPROCESSABLE_ENTITY,
                    body: json!({ "error": e.to_string(), "filename": u.filename }),
                }
            })?;
            preprocess_eval(&raster, &model.preprocess).map_err(|e| ApiError::from(HabitatError::from(e)))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(model.classifier.predict_probabilities(&tensors)?)
}

async fn predict(
    State(state): State<Arc<AppState>>,
    multipart: Multipart,
) -> std::result::Result<Json<Vec<PredictionResponse>>, ApiError> {
    state.purge_expired();
    if state.model.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"));
    }
    let uploads = read_uploads(&state, multipart).await?;
    let worker = state.clone();
    let (uploads, probabilities) = tokio::task::spawn_blocking(move || {
        let model = worker.model.as_ref().expect("checked above");
        classify(model, &uploads).map(|p| (uploads, p))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;

    let model = state.model.as_ref().expect("checked above");
    let mut out = Vec::with_capacity(uploads.len());
    for (upload, probs) in uploads.iter().zip(probabilities) {
        let image_id = Uuid::new_v4().to_string();
        let ranked = rank_labels(&probs, &state.taxonomy, TOP_K);
        let top3: Vec<RankedClass> = ranked
            .iter()
            .map(|r| {
                let class = state.taxonomy.class(&r.abbreviation).expect("ranked from the taxonomy");
                RankedClass {
                    abbreviation: class.abbreviation.clone(),
                    name: class.name.clone(),
                    definition: class.definition.clone(),
                    probability: r.probability,
                    probability_display: format!("{:.4}", r.probability),
                }
            })
            .collect();
        let file = state
            .config
            .upload_dir
            .join(format!("{image_id}.{}", upload.extension));
        std::fs::write(&file, &upload.bytes).at(&file)?;
        state.sessions.lock().expect("session lock").insert(
            image_id.clone(),
            Session {
                file,
                predicted_label: top3[0].abbreviation.clone(),
                created: Instant::now(),
            },
        );
        out.push(PredictionResponse {
            image_id,
            filename: upload.filename.clone(),
            model_version: model.meta.model_version.clone(),
            top3,
        });
    }
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    image_id: String,
    predicted_label: String,
    verdict: Verdict,
    #[serde(default)]
    corrected_label: Option<String>,
    #[serde(default)]
    custom_label: Option<String>,
    confidence_shown: f64,
    consent_to_store: bool,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

fn validate_feedback(req: FeedbackRequest, taxonomy: &ClassTaxonomy) -> std::result::Result<FeedbackRecord, String> {
    if !(req.confidence_shown.is_finite() && (0.0..=1.0).contains(&req.confidence_shown)) {
        return Err("confidence_shown must be within [0, 1]".into());
    }
    let corrected = non_empty(req.corrected_label);
    let custom = non_empty(req.custom_label);
    match req.verdict {
        Verdict::Confirm => {
            if corrected.is_some() || custom.is_some() {
                return Err("a confirmation carries no corrected or custom label".into());
            }
        }
        Verdict::Correct => {
            let label = corrected.as_deref().ok_or("verdict `correct` requires corrected_label")?;
            if taxonomy.index_of(label).is_none() {
                return Err(format!("corrected_label `{label}` is not a class of the taxonomy"));
            }
            if custom.is_some() {
                return Err("verdict `correct` carries no custom_label".into());
            }
        }
        Verdict::Custom => {
            if custom.is_none() {
                return Err("verdict `custom` requires a non-empty custom_label".into());
            }
            if corrected.is_some() {
                return Err("verdict `custom` carries no corrected_label".into());
            }
        }
    }
    Ok(FeedbackRecord {
        timestamp: Utc::now(),
        image_id: req.image_id,
        predicted_label: req.predicted_label,
        verdict: req.verdict,
        corrected_label: corrected,
        custom_label: custom,
        confidence_shown: req.confidence_shown,
        consent: req.consent_to_store,
    })
}

fn move_file(from: &Path, to: &Path) -> Result<()> {
    if std::fs::rename(from, to).is_err() {
        std::fs::copy(from, to).at(to)?;
        std::fs::remove_file(from).at(from)?;
    }
    Ok(())
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    state.purge_expired();
    let req: FeedbackRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid feedback body: {e}")))?;
    let session = state
        .sessions
        .lock()
        .expect("session lock")
        .get(&req.image_id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image_id `{}`", req.image_id)))?;
    if req.predicted_label != session.predicted_label {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!(
                "predicted_label `{}` differs from the prediction `{}`",
                req.predicted_label, session.predicted_label
            ),
        ));
    }
    let record = validate_feedback(req, &state.taxonomy).map_err(|m| ApiError::new(StatusCode::BAD_REQUEST, m))?;

    // Claim the session so concurrent feedback for the same image is rejected.
    if state
        .sessions
        .lock()
        .expect("session lock")
        .remove(&record.image_id)
        .is_none()
    {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown image_id `{}`", record.image_id),
        ));
    }
    {
        let log = state.feedback.lock().expect("feedback lock");
        log.append(&record)?;
    }
    let retained = if record.consent {
        let name = session.file.file_name().expect("upload has a file name");
        let target = state.config.retention_dir.join(name);
        move_file(&session.file, &target)?;
        true
    } else {
        std::fs::remove_file(&session.file).at(&session.file)?;
        false
    };
    Ok(Json(json!({
        "status": "recorded",
        "image_id": record.image_id,
        "timestamp": record.timestamp,
        "retained": retained,
    })))
}

async fn classes(State(state): State<Arc<AppState>>) -> Json<Vec<ClassEntry>> {
    Json(
        state
            .taxonomy
            .classes()
            .iter()
            .map(|c| ClassEntry {
                abbreviation: c.abbreviation.clone(),
                name: c.name.clone(),
                definition: c.definition.clone(),
            })
            .collect(),
    )
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let uptime = state.started.elapsed().as_secs();
    match &state.model {
        Some(m) => (
            StatusCode::OK,
            Json(json!({ "status": "ok", "model_version": m.meta.model_version, "uptime_seconds": uptime })),
        )
            .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "unavailable", "model_version": null, "uptime_seconds": uptime })),
        )
            .into_response(),
    }
}

async fn require_token(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.config.auth_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = state
        .config
        .max_file_bytes
        .saturating_mul(MAX_FILES_PER_REQUEST)
        .saturating_add(1 << 20);
    let protected = Router::new()
        .route("/predict", post(predict))
        .route("/feedback", post(feedback))
        .route("/classes", get(classes))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .merge(protected)
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Serves until Ctrl-C, purging expired sessions in the background.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| HabitatError::io(addr.to_string(), e))?;
    let local = listener.local_addr().map_err(|e| HabitatError::io(addr.to_string(), e))?;
    tracing::info!(%local, "listening");
    let purger = state.clone();
    let period = (state.config.session_ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(300));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            purger.purge_expired();
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| HabitatError::io(local.to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(verdict: Verdict, corrected: Option<&str>, custom: Option<&str>) -> FeedbackRequest {
        FeedbackRequest {
            image_id: "x".into(),
            predicted_label: "WAT".into(),
            verdict,
            corrected_label: corrected.map(String::from),
            custom_label: custom.map(String::from),
            confidence_shown: 0.5,
            consent_to_store: false,
        }
    }

    #[test]
    fn feedback_invariants() {
        let t = ClassTaxonomy::living_england();
        assert!(validate_feedback(req(Verdict::Confirm, None, None), &t).is_ok());
        assert!(validate_feedback(req(Verdict::Confirm, Some(""), None), &t).is_ok());
        assert!(validate_feedback(req(Verdict::Correct, Some("UG"), None), &t).is_ok());
        assert!(validate_feedback(req(Verdict::Correct, None, None), &t).is_err());
        assert!(validate_feedback(req(Verdict::Correct, Some("XX"), None), &t).is_err());
        assert!(validate_feedback(req(Verdict::Custom, None, Some("  ")), &t).is_err());
        let r = validate_feedback(req(Verdict::Custom, None, Some("Reedbed, wet")), &t).unwrap();
        assert_eq!(r.custom_label.as_deref(), Some("Reedbed, wet"));
        let mut bad = req(Verdict::Confirm, None, None);
        bad.confidence_shown = 1.5;
        assert!(validate_feedback(bad, &t).is_err());
    }

    fn record(i: usize) -> FeedbackRecord {
        FeedbackRecord {
            timestamp: Utc::now(),
            image_id: format!("id{i}"),
            predicted_label: "WAT".into(),
            verdict: Verdict::Custom,
            corrected_label: None,
            custom_label: Some("has, comma \"quoted\"".into()),
            confidence_shown: 0.25,
            consent: i.is_multiple_of(2),
        }
    }

    #[test]
    fn log_header_and_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let log = FeedbackLog::new(dir.path(), u64::MAX).unwrap();
        log.append(&record(0)).unwrap();
        log.append(&record(1)).unwrap();
        let text = std::fs::read_to_string(log.csv_path()).unwrap();
        assert_eq!(text.lines().next().unwrap(), FEEDBACK_CSV_HEADER);
        let mut r = csv::Reader::from_path(log.csv_path()).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][5], "has, comma \"quoted\"");
        assert_eq!(&rows[1][7], "false");
        let json = std::fs::read_to_string(log.jsonl_path()).unwrap();
        let back: FeedbackRecord = serde_json::from_str(json.lines().nth(1).unwrap()).unwrap();
        assert_eq!(back.image_id, "id1");
    }

    #[test]
    fn rotation_keeps_logs_paired() {
        let dir = tempfile::tempdir().unwrap();
        let log = FeedbackLog::new(dir.path(), 300).unwrap();
        for i in 0..12 {
            log.append(&record(i)).unwrap();
        }
        let mut csv_rows = 0;
        let mut json_rows = 0;
        let mut suffixes = Vec::new();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name().to_string_lossy().to_string();
            let text = std::fs::read_to_string(dir.path().join(&name)).unwrap();
            if name.starts_with(FEEDBACK_CSV) {
                assert!(text.starts_with(FEEDBACK_CSV_HEADER), "{name}");
                csv_rows += text.lines().count() - 1;
                if let Some(n) = name.strip_prefix("feedback.csv.") {
                    suffixes.push(n.parse::<u64>().unwrap());
                }
            } else {
                json_rows += text.lines().count();
            }
        }
        assert_eq!(csv_rows, 12);
        assert_eq!(json_rows, 12);
        suffixes.sort_unstable();
        assert!(!suffixes.is_empty());
        assert_eq!(suffixes, (1..=suffixes.len() as u64).collect::<Vec<_>>());
    }
}
