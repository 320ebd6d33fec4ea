use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::error::{Result, ServiceError};
use crate::project::{
    IngestReport, IngestTarget, LabelSubmission, MetricsView, Project, ProjectConfig, ProjectSummary,
    SelectionResult, SubmitReport, TrainingReport, UploadFile,
};

const MAX_UPLOAD: usize = 512 * 1024 * 1024;

struct Handle {
    project: Mutex<Project>,
    /// Set while a training job runs.
    busy: AtomicBool,
}

impl Handle {
    fn lock(&self) -> std::sync::MutexGuard<'_, Project> {
        self.project.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn ensure_idle(&self) -> Result<()> {
        if self.busy.load(Ordering::SeqCst) {
            return Err(ServiceError::Busy("training in progress".into()));
        }
        Ok(())
    }
}

/// All projects below one root directory, one subdirectory each.
#[derive(Clone)]
pub struct AppState {
    root: PathBuf,
    projects: Arc<RwLock<BTreeMap<String, Arc<Handle>>>>,
}

impl AppState {
    /// Loads every project found directly below `root`.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        let mut projects = BTreeMap::new();
        for entry in std::fs::read_dir(root)? {
            let path = entry?.path();
            if path.join("manifest.json").is_file() {
                let project = Project::load(&path)?;
                log::info!("loaded project {} from {}", project.id(), path.display());
                projects.insert(
                    project.id().to_string(),
                    Arc::new(Handle { project: Mutex::new(project), busy: AtomicBool::new(false) }),
                );
            }
        }
        Ok(Self { root: root.to_path_buf(), projects: Arc::new(RwLock::new(projects)) })
    }

    fn get(&self, id: &str) -> Result<Arc<Handle>> {
        self.projects
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound { kind: "project", id: id.into() })
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/projects", post(create_project).get(list_projects))
        .route("/projects/{id}", get(get_project))
        .route("/projects/{id}/data", post(ingest))
        .route("/projects/{id}/select", post(select))
        .route("/projects/{id}/labels", post(submit_labels))
        .route("/projects/{id}/train", post(train))
        .route("/projects/{id}/metrics", get(metrics))
        .route("/projects/{id}/images/{image_id}", get(image))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

/// Serves `root` until the listener fails.
pub async fn serve(root: &Path, addr: SocketAddr) -> Result<()> {
    let state = AppState::open(root)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(listener, state).await
}

pub async fn serve_listener(listener: tokio::net::TcpListener, state: AppState) -> Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e.to_string())))?
}

async fn create_project(
    State(state): State<AppState>,
    Json(config): Json<ProjectConfig>,
) -> Result<(StatusCode, Json<ProjectSummary>)> {
    config.validate()?;
    let dir = state.root.join(uuid::Uuid::new_v4().simple().to_string());
    let project = blocking(move || Project::create(&dir, config)).await?;
    let summary = project.summary();
    let handle = Arc::new(Handle { project: Mutex::new(project), busy: AtomicBool::new(false) });
    state.projects.write().unwrap_or_else(|e| e.into_inner()).insert(summary.id.clone(), handle);
    Ok((StatusCode::CREATED, Json(summary)))
}

async fn list_projects(State(state): State<AppState>) -> Json<Vec<ProjectSummary>> {
    let handles: Vec<Arc<Handle>> = state.projects.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
    Json(handles.iter().map(|h| h.lock().summary()).collect())
}

async fn get_project(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ProjectSummary>> {
    Ok(Json(state.get(&id)?.lock().summary()))
}

#[derive(Debug, Deserialize)]
struct IngestQuery {
    #[serde(default)]
    pool: IngestTarget,
}

async fn ingest(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<IngestQuery>,
    mut multipart: Multipart,
) -> Result<Json<IngestReport>> {
    let handle = state.get(&id)?;
    let mut files = Vec::new();
    while let Some(field) = multipart.next_field().await.map_err(|e| ServiceError::Validation(e.to_string()))? {
        let name = field
            .file_name()
            .map(str::to_string)
            .ok_or_else(|| ServiceError::Validation("every multipart field needs a file name".into()))?;
        let bytes = field.bytes().await.map_err(|e| ServiceError::Validation(e.to_string()))?;
        files.push(UploadFile { name, bytes: bytes.to_vec() });
    }
    let report = blocking(move || handle.lock().ingest(files, query.pool)).await?;
    Ok(Json(report))
}

async fn select(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SelectionResult>> {
    let handle = state.get(&id)?;
    handle.ensure_idle()?;
    let job = handle.lock().selection_job()?;
    let outcome = blocking(move || job.run()).await?;
    handle.ensure_idle()?;
    let result = handle.lock().install_selection(outcome)?;
    Ok(Json(result))
}

async fn submit_labels(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(submission): Json<LabelSubmission>,
) -> Result<Json<SubmitReport>> {
    let handle = state.get(&id)?;
    handle.ensure_idle()?;
    let report = blocking(move || handle.lock().submit_labels(submission)).await?;
    Ok(Json(report))
}

async fn train(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<TrainingReport>> {
    let handle = state.get(&id)?;
    if handle.busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
        return Err(ServiceError::Busy("training in progress".into()));
    }
    let h = handle.clone();
    let result = blocking(move || {
        let job = h.lock().training_job()?;
        let outcome = job.run()?;
        h.lock().finish_training(outcome)
    })
    .await;
    handle.busy.store(false, Ordering::SeqCst);
    Ok(Json(result?))
}

async fn metrics(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<MetricsView>> {
    Ok(Json(state.get(&id)?.lock().metrics()))
}

async fn image(
    State(state): State<AppState>,
    UrlPath((id, image_id)): UrlPath<(String, String)>,
) -> Result<impl IntoResponse> {
    let png = state.get(&id)?.lock().image_png(&image_id)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}
