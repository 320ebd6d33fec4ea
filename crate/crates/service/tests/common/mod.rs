#![allow(dead_code)]

use std::path::Path;

use alkit_core::detector::TrainHyper;
use alkit_core::synthdata::{generate_scene, save_scene, SceneSpec};
use alkit_service::{
    serve_listener, Action, AppState, Decision, ErrorBody, IngestReport, LabelSubmission, MetricsView, Project, ProjectConfig,
    ProjectSummary, SelectionResult, SubmitReport, UploadFile,
};
use reqwest::multipart::{Form, Part};
use reqwest::StatusCode;
use serde_json::json;

pub fn scene_spec() -> SceneSpec {
    SceneSpec::default()
}

/// `n` generated scenes as PNG files, each followed by its sidecar when
/// `sidecars` is set.
pub fn scene_files(n: usize, seed: u64, sidecars: bool) -> Vec<UploadFile> {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..n {
        let scene = generate_scene(&scene_spec(), seed * 100_000 + i as u64).unwrap();
        let stem = format!("scene_{seed}_{i:04}");
        let sidecar = save_scene(&scene, dir.path(), &stem).unwrap();
        let png = format!("{stem}.png");
        files.push(UploadFile { bytes: std::fs::read(dir.path().join(&png)).unwrap(), name: png });
        if sidecars {
            files.push(UploadFile { bytes: std::fs::read(dir.path().join(&sidecar)).unwrap(), name: sidecar });
        }
    }
    files
}

pub fn config() -> ProjectConfig {
    ProjectConfig {
        name: "scripted".into(),
        classes: scene_spec().class_names(),
        initial: TrainHyper { iterations: 200, ..TrainHyper::default() },
        update_iterations: 30,
        seed: 7,
        ..ProjectConfig::default()
    }
}

pub fn confirm_all(selection: &SelectionResult) -> LabelSubmission {
    LabelSubmission {
        batch_id: selection.batch_id.clone(),
        decisions: selection
            .images
            .iter()
            .flat_map(|i| i.proposals.iter())
            .map(|p| Decision { proposal_id: p.id, action: Action::Confirm })
            .collect(),
        added_boxes: Vec::new(),
    }
}

fn multipart(files: &[UploadFile]) -> Form {
    files.iter().fold(Form::new(), |form, f| {
        form.part(f.name.clone(), Part::bytes(f.bytes.clone()).file_name(f.name.clone()))
    })
}

pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    pub fn new(base: String) -> Self {
        Self { http: reqwest::Client::new(), base }
    }

    async fn json<T: serde::de::DeserializeOwned>(&self, resp: reqwest::Response, want: StatusCode) -> Result<T, String> {
        let status = resp.status();
        let text = resp.text().await.map_err(|e| e.to_string())?;
        if status != want {
            return Err(format!("expected {want}, got {status}: {text}"));
        }
        serde_json::from_str(&text).map_err(|e| format!("{e}: {text}"))
    }

    async fn error(&self, resp: reqwest::Response) -> (StatusCode, ErrorBody) {
        let status = resp.status();
        (status, resp.json().await.expect("uniform error body"))
    }

    pub async fn create(&self, config: &ProjectConfig) -> Result<ProjectSummary, String> {
        let resp = self.http.post(format!("{}/projects", self.base)).json(config).send().await.map_err(|e| e.to_string())?;
        self.json(resp, StatusCode::CREATED).await
    }

    pub async fn summary(&self, id: &str) -> Result<ProjectSummary, String> {
        let resp = self.http.get(format!("{}/projects/{id}", self.base)).send().await.map_err(|e| e.to_string())?;
        self.json(resp, StatusCode::OK).await
    }

    pub async fn ingest(&self, id: &str, files: &[UploadFile], pool: &str) -> Result<IngestReport, String> {
        let resp = self
            .http
            .post(format!("{}/projects/{id}/data?pool={pool}", self.base))
            .multipart(multipart(files))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        self.json(resp, StatusCode::OK).await
    }

    pub async fn select(&self, id: &str) -> Result<SelectionResult, String> {
        let resp = self.http.post(format!("{}/projects/{id}/select", self.base)).send().await.map_err(|e| e.to_string())?;
        self.json(resp, StatusCode::OK).await
    }

    async fn post_labels(&self, id: &str, body: &serde_json::Value) -> reqwest::Response {
        self.http.post(format!("{}/projects/{id}/labels", self.base)).json(body).send().await.unwrap()
    }

    pub async fn submit(&self, id: &str, submission: &LabelSubmission) -> Result<SubmitReport, String> {
        let resp = self.post_labels(id, &json!(submission)).await;
        self.json(resp, StatusCode::OK).await
    }

    async fn post_train(&self, id: &str) -> reqwest::Response {
        self.http.post(format!("{}/projects/{id}/train", self.base)).send().await.unwrap()
    }

    pub async fn metrics(&self, id: &str) -> Result<MetricsView, String> {
        let resp = self.http.get(format!("{}/projects/{id}/metrics", self.base)).send().await.map_err(|e| e.to_string())?;
        self.json(resp, StatusCode::OK).await
    }
}

pub struct RoundTrip {
    pub project_id: String,
    pub digest: String,
    pub log: Vec<String>,
}

fn ensure(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

/// create, ingest 30 scenes, select, confirm all, train, metrics, with the
/// error paths exercised on the way.
pub async fn scripted_session(client: &Client) -> Result<RoundTrip, String> {
    let mut log = Vec::new();
    let project = client.create(&config()).await?;
    let id = project.id.clone();
    let fresh = client.metrics(&id).await?;
    ensure(fresh.rows.is_empty() && fresh.pools.total() == 0, "fresh project has rows or images")?;

    let files = scene_files(30, 1, true);
    let first = client.ingest(&id, &files, "unlabeled").await?;
    ensure(first.added == 30, format!("ingested {} of 30", first.added))?;
    let again = client.ingest(&id, &files, "unlabeled").await?;
    ensure(again.added == 0 && again.skipped == 30, "re-ingest was not deduplicated")?;
    let heldout = client.ingest(&id, &scene_files(10, 2, true), "heldout").await?;
    ensure(heldout.added == 10, "held-out ingest")?;
    log.push("ingest 30 + dedup + 10 held-out".into());

    let bad = vec![files[0].clone(), UploadFile { name: "broken.json".into(), bytes: b"{".to_vec() }];
    let resp = client.http.post(format!("{}/projects/{id}/data", client.base)).multipart(multipart(&bad)).send().await.unwrap();
    let (status, body) = client.error(resp).await;
    ensure(status == StatusCode::BAD_REQUEST && body.message.contains("broken.json"), format!("bad upload: {status} {body:?}"))?;

    let (status, body) = client.error(client.post_train(&id).await).await;
    ensure(status == StatusCode::BAD_REQUEST && body.code == "validation", "train with nothing staged")?;
    let resp = client.http.get(format!("{}/projects/nope", client.base)).send().await.unwrap();
    let (status, body) = client.error(resp).await;
    ensure(status == StatusCode::NOT_FOUND && body.code == "not_found", "unknown project")?;

    let selection = client.select(&id).await?;
    let proposals: usize = selection.images.iter().map(|i| i.proposals.len()).sum();
    let value_sum: f64 = selection.images.iter().map(|i| i.value).sum();
    ensure(selection.images.len() == 10, "batch size")?;
    ensure((selection.batch_value - value_sum).abs() < 1e-9, "batch value is not the sum of image values")?;
    log.push(format!("selected {} with {} images, {proposals} proposals", selection.batch_id, selection.images.len()));

    let img = client.http.get(format!("{}/projects/{id}/images/{}", client.base, selection.images[0].image_id)).send().await.unwrap();
    ensure(img.headers()[reqwest::header::CONTENT_TYPE] == "image/png", "image content type")?;
    let raster = alkit_core::synthdata::Raster::from_png_bytes(&img.bytes().await.unwrap()).map_err(|e| e.to_string())?;
    ensure(raster.width == 96, "image size")?;

    let before = client.summary(&id).await?.digest;
    let mut partial = confirm_all(&selection);
    if !partial.decisions.is_empty() {
        partial.decisions.pop();
        let (status, _) = client.error(client.post_labels(&id, &json!(partial)).await).await;
        ensure(status == StatusCode::BAD_REQUEST, "missing decision accepted")?;
    }
    let mut wrong = confirm_all(&selection);
    wrong.batch_id = "batch-999".into();
    let (status, body) = client.error(client.post_labels(&id, &json!(wrong)).await).await;
    ensure(status == StatusCode::CONFLICT && body.code == "stale_batch", "stale batch id accepted")?;
    ensure(client.summary(&id).await?.digest == before, "rejected submissions changed state")?;

    let submitted = client.submit(&id, &confirm_all(&selection)).await?;
    ensure(submitted.accepted == proposals && submitted.images == 10, "confirm-all count")?;
    let pools = client.metrics(&id).await?.pools;
    ensure(pools.unlabeled == 20 && pools.staged == 10 && pools.labeled == 0, format!("pools after submit {pools:?}"))?;

    // Two trainings at once: exactly one succeeds.
    let (a, b) = tokio::join!(client.post_train(&id), client.post_train(&id));
    let statuses = [a.status(), b.status()];
    let ok = statuses.iter().filter(|s| **s == StatusCode::OK).count();
    ensure(ok == 1, format!("concurrent trains returned {statuses:?}"))?;
    let loser = if a.status() == StatusCode::OK { b } else { a };
    ensure(matches!(loser.status(), StatusCode::CONFLICT | StatusCode::BAD_REQUEST), "second train")?;
    log.push(format!("train x2 concurrently -> {statuses:?}"));

    let metrics = client.metrics(&id).await?;
    ensure(metrics.rows.len() == 1, format!("{} curve rows", metrics.rows.len()))?;
    ensure(metrics.rows[0].labeled_count == 10 && metrics.rows[0].map.is_some(), "curve row content")?;
    let p = metrics.pools;
    ensure(p.unlabeled == 20 && p.staged == 0 && p.labeled == 10 && p.heldout == 10, format!("final pools {p:?}"))?;
    log.push(format!("pools {}/{}/{}/{} conserved, 1 curve row", p.unlabeled, p.staged, p.labeled, p.heldout));

    let summary = client.summary(&id).await?;
    Ok(RoundTrip { project_id: id, digest: summary.digest, log })
}

/// Runs the scripted session against a live server, kills it, reloads the
/// project from disk and compares digests.
pub fn service_round_trip(root: &Path) -> Result<String, String> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let trip = runtime.block_on(async {
        let state = AppState::open(root).map_err(|e| e.to_string())?;
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let addr = listener.local_addr().unwrap();
        let server = tokio::spawn(serve_listener(listener, state));
        let client = Client::new(format!("http://{addr}"));
        let result = scripted_session(&client).await;
        server.abort();
        result
    })?;
    drop(runtime);
    let dir = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| Project::load(p).map(|pr| pr.id() == trip.project_id).unwrap_or(false))
        .ok_or("project directory not found")?;
    let reloaded = Project::load(&dir).map_err(|e| e.to_string())?;
    ensure(reloaded.digest() == trip.digest, "reloaded digest differs")?;
    Ok(format!("{}; reload digest identical", trip.log.join("; ")))
}
