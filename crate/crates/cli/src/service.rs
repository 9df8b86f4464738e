//! HTTP API backing the annotation UI.
//!
//! Records live in memory behind one mutex and every accepted mutation is
//! written back to the manifest before the response goes out, so the
//! manifest file has a single writer. Writes to a task carry the version
//! the client last saw; a mismatch is rejected with 409 and the current
//! version.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mangamark::annotation::{
    complete_record, disagreements, merge_record, task_status, upsert_annotation, AnnotationTask, MergeOutcome,
    TaskStatus,
};
use mangamark::config::PipelineConfig;
use mangamark::dataset::{read_manifest, write_manifest, FaceRecord};
use mangamark::imaging::GrayImage;
use mangamark::net::{checkpoint, CascadeModel};
use mangamark::pipeline::{predict_landmarks, Workspace};
use mangamark::qc::Completion;
use mangamark::{Error, LandmarkSet};

struct Store {
    manifest: PathBuf,
    records: Vec<FaceRecord>,
    index: HashMap<String, usize>,
}

pub struct ServiceState {
    store: Mutex<Store>,
    image_root: PathBuf,
    tolerance: f64,
    model: Option<(String, CascadeModel)>,
}

impl ServiceState {
    pub fn new(
        manifest: PathBuf,
        records: Vec<FaceRecord>,
        image_root: PathBuf,
        tolerance: f64,
        model: Option<(String, CascadeModel)>,
    ) -> mangamark::Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(Self {
            store: Mutex::new(Store {
                manifest,
                records,
                index,
            }),
            image_root,
            tolerance,
            model,
        })
    }

    /// Serves the input manifest of `cfg`. With an experiment name, its
    /// trained checkpoint answers the predictions endpoint.
    pub fn open(cfg: &PipelineConfig, experiment: Option<&str>) -> mangamark::Result<Self> {
        let records = read_manifest(&cfg.paths.manifest)?;
        let model = match experiment {
            Some(name) => {
                cfg.experiment(name)?;
                let path = Workspace::new(&cfg.paths.work_dir).model(name);
                Some((name.to_string(), checkpoint::load(&path)?))
            }
            None => None,
        };
        Self::new(
            cfg.paths.manifest.clone(),
            records,
            cfg.paths.image_root.clone(),
            cfg.dataset.tolerance,
            model,
        )
    }

    fn lock(&self) -> MutexGuard<'_, Store> {
        // A panic mid-request leaves at worst an unpersisted edit; the store
        // itself stays consistent.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    current_version: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            current_version: None,
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", format!("no task {id:?}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io(_) | Error::Image(_) | Error::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, "invalid", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind, "message": self.message });
        if let Some(v) = self.current_version {
            body["current_version"] = json!(v);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type AppState = State<Arc<ServiceState>>;

impl Store {
    fn get(&self, id: &str) -> Result<&FaceRecord, ApiError> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Applies `f` to the record and persists the manifest if `f` reports a
    /// change. On a failed write the record is restored.
    fn mutate<T>(
        &mut self,
        id: &str,
        f: impl FnOnce(&mut FaceRecord) -> Result<(T, bool), ApiError>,
    ) -> Result<T, ApiError> {
        let i = *self.index.get(id).ok_or_else(|| ApiError::not_found(id))?;
        let before = self.records[i].clone();
        let (out, changed) = f(&mut self.records[i])?;
        if changed {
            self.records[i].version = before.version + 1;
            if let Err(e) = write_manifest(&self.manifest, &self.records) {
                self.records[i] = before;
                return Err(e.into());
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct StatusFilter {
    status: Option<String>,
}

async fn list_tasks(State(s): AppState, Query(q): Query<StatusFilter>) -> ApiResult<Vec<AnnotationTask>> {
    let wanted = match q.status.as_deref() {
        Some(text) => Some(
            text.parse::<TaskStatus>()
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad-request", e.to_string()))?,
        ),
        None => None,
    };
    let store = s.lock();
    Ok(Json(
        store
            .records
            .iter()
            .filter(|r| wanted.is_none_or(|w| task_status(r, s.tolerance) == w))
            .map(|r| AnnotationTask::from_record(r, s.tolerance))
            .collect(),
    ))
}

async fn get_task(State(s): AppState, Path(id): Path<String>) -> ApiResult<AnnotationTask> {
    let store = s.lock();
    Ok(Json(AnnotationTask::from_record(store.get(&id)?, s.tolerance)))
}

/// PNG of the face box region. `X-Crop-Origin` gives the crop's top-left
/// corner in image pixels, so UI clicks map back to image coordinates.
async fn get_image(State(s): AppState, Path(id): Path<String>) -> Result<Response, ApiError> {
    let record = s.lock().get(&id)?.clone();
    let image = GrayImage::load(record.image_path(&s.image_root))?;
    let b = record.bbox;
    let (x0, y0) = (b.x.max(0.0).floor() as usize, b.y.max(0.0).floor() as usize);
    let x1 = (b.x + b.w).ceil().max(0.0) as usize;
    let y1 = (b.y + b.h).ceil().max(0.0) as usize;
    let png = image
        .crop(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
        .encode_png()?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png".to_string()),
            (header::HeaderName::from_static("x-crop-origin"), format!("{x0},{y0}")),
        ],
        png,
    )
        .into_response())
}

#[derive(Debug, Deserialize)]
pub struct AnnotationUpdate {
    /// 60 slots in canonical order; `null` marks an absent landmark.
    pub points: LandmarkSet,
    /// The task version this edit was based on.
    pub version: u64,
}

#[derive(Debug, Serialize)]
struct Saved {
    task: AnnotationTask,
}

async fn put_annotation(
    State(s): AppState,
    Path((id, labeler)): Path<(String, String)>,
    Json(update): Json<AnnotationUpdate>,
) -> ApiResult<Saved> {
    if labeler.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad-request", "empty labeler id"));
    }
    let mut store = s.lock();
    store.mutate(&id, |r| {
        if r.version != update.version {
            return Err(ApiError {
                current_version: Some(r.version),
                ..ApiError::new(
                    StatusCode::CONFLICT,
                    "conflict",
                    format!("task {id} is at version {}, edit was based on {}", r.version, update.version),
                )
            });
        }
        upsert_annotation(r, &labeler, update.points);
        Ok(((), true))
    })?;
    Ok(Json(Saved {
        task: AnnotationTask::from_record(store.get(&id)?, s.tolerance),
    }))
}

#[derive(Debug, Deserialize)]
struct ToleranceQuery {
    tolerance: Option<f64>,
}

async fn get_disagreements(
    State(s): AppState,
    Path(id): Path<String>,
    Query(q): Query<ToleranceQuery>,
) -> ApiResult<mangamark::qc::DisagreementReport> {
    let tolerance = q.tolerance.unwrap_or(s.tolerance);
    let store = s.lock();
    disagreements(store.get(&id)?, tolerance).map(Json).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid",
            format!("task {id} has fewer than two labelings"),
        )
    })
}

#[derive(Debug, Deserialize)]
struct MergeQuery {
    #[serde(default)]
    force: bool,
}

#[derive(Debug, Serialize)]
struct Merged {
    #[serde(flatten)]
    outcome: MergeOutcome,
    version: u64,
}

async fn post_merge(State(s): AppState, Path(id): Path<String>, Query(q): Query<MergeQuery>) -> ApiResult<Merged> {
    let tolerance = s.tolerance;
    let mut store = s.lock();
    let outcome = store.mutate(&id, |r| {
        let before = (r.merged, r.completed);
        let outcome = merge_record(r, tolerance, q.force)?;
        let changed = before != (r.merged, r.completed);
        Ok((outcome, changed))
    })?;
    Ok(Json(Merged {
        outcome,
        version: store.get(&id)?.version,
    }))
}

#[derive(Debug, Deserialize)]
struct CompleteQuery {
    #[serde(default)]
    dry_run: bool,
}

#[derive(Debug, Serialize)]
struct Completed {
    #[serde(flatten)]
    completion: Completion,
    version: u64,
}

async fn post_complete(
    State(s): AppState,
    Path(id): Path<String>,
    Query(q): Query<CompleteQuery>,
) -> ApiResult<Completed> {
    let mut store = s.lock();
    let completion = store.mutate(&id, |r| {
        let before = r.completed;
        let c = complete_record(r, q.dry_run)?;
        Ok((c, before != r.completed))
    })?;
    Ok(Json(Completed {
        completion,
        version: store.get(&id)?.version,
    }))
}

#[derive(Debug, Serialize)]
struct Proposal {
    id: String,
    experiment: String,
    points: LandmarkSet,
}

async fn get_predictions(State(s): AppState, Path(id): Path<String>) -> ApiResult<Proposal> {
    let record = s.lock().get(&id)?.clone();
    let Some((name, _)) = &s.model else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "no-model",
            "service was started without a checkpoint",
        ));
    };
    let name = name.clone();
    let state = Arc::clone(&s);
    let points = tokio::task::spawn_blocking(move || {
        let (_, model) = state.model.as_ref().expect("checked above");
        let image = GrayImage::load(record.image_path(&state.image_root))?;
        predict_landmarks(model, &image, &record.bbox)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(Proposal {
        id,
        experiment: name,
        points,
    }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/api/tasks", get(list_tasks))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/images/{id}", get(get_image))
        .route("/api/tasks/{id}/annotations/{labeler}", put(put_annotation))
        .route("/api/tasks/{id}/disagreements", get(get_disagreements))
        .route("/api/tasks/{id}/merge", post(post_merge))
        .route("/api/tasks/{id}/complete", post(post_complete))
        .route("/api/tasks/{id}/predictions", get(get_predictions))
        .with_state(state)
}

pub async fn serve(state: ServiceState, addr: SocketAddr) -> mangamark::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
