//! One annotation project on disk: `manifest.json`, `model.bin`,
//! `events.log` and `scenes/`. The manifest is the commit point; every
//! operation rewrites it atomically before returning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use alkit_core::detector::{
    decode, evaluate_map, incremental_update, train_initial, CellFeatures, DetectorModel, GridConfig, PreparedScene,
    TrainHyper,
};
use alkit_core::metrics::{value_batch, value_image, MetricKind};
use alkit_core::protocol::partition_unlabeled;
use alkit_core::seeds;
use alkit_core::synthdata::{GroundTruthBox, Raster, SceneRecord};
use alkit_core::BBox;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};

pub const PROJECT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const MODEL: &str = "model.bin";
const MODEL_NEXT: &str = "model.bin.next";
const EVENTS: &str = "events.log";
const SCENES: &str = "scenes";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectConfig {
    pub name: String,
    /// Initial class registry.
    pub classes: Vec<String>,
    pub metric: MetricKind,
    pub image_size: usize,
    pub batch_size: usize,
    /// Decode threshold on the objectness confidence.
    pub confidence_threshold: f64,
    pub lambda: f64,
    pub update_iterations: usize,
    /// Used for the first training, which starts from scratch.
    pub initial: TrainHyper,
    pub seed: u64,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            name: "project".into(),
            classes: Vec::new(),
            metric: MetricKind::Sum,
            image_size: 96,
            batch_size: 10,
            confidence_threshold: 0.2,
            lambda: 0.5,
            update_iterations: 100,
            initial: TrainHyper { iterations: 2000, ..TrainHyper::default() },
            seed: 0,
        }
    }
}

impl ProjectConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ServiceError::Validation(m.into()));
        if self.classes.is_empty() {
            return fail("at least one class is required");
        }
        let unique: BTreeSet<&str> = self.classes.iter().map(|s| s.as_str()).collect();
        if unique.len() != self.classes.len() || self.classes.iter().any(|c| c.trim().is_empty()) {
            return fail("class names must be unique and non-empty");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return fail("confidence_threshold must lie in [0, 1]");
        }
        self.grid().validate()?;
        Ok(())
    }

    fn grid(&self) -> GridConfig {
        GridConfig { confidence_threshold: self.confidence_threshold, ..GridConfig::new(self.image_size, self.classes.len()) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Unlabeled,
    /// Labeled but not yet used for training.
    Staged,
    Labeled,
    /// Evaluation only.
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub pool: Pool,
    /// Upload file name.
    pub source: String,
    pub boxes: Vec<GroundTruthBox>,
    /// Cells whose proposals were rejected.
    #[serde(default)]
    pub negative_cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub id: usize,
    pub image_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub class_distribution: Vec<f64>,
    pub confidence: f64,
    pub bbox: BBox,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedImage {
    pub image_id: String,
    pub value: f64,
    pub proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub batch_id: String,
    pub metric: MetricKind,
    pub images: Vec<SelectedImage>,
    pub batch_value: f64,
}

/// Exactly one of the two fields must be set; an unknown name registers
/// a new class.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_name: Option<String>,
}

impl ClassRef {
    pub fn id(class_id: usize) -> Self {
        Self { class_id: Some(class_id), class_name: None }
    }

    pub fn name(name: impl Into<String>) -> Self {
        Self { class_id: None, class_name: Some(name.into()) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Confirm,
    Reject,
    Reassign {
        #[serde(flatten)]
        class: ClassRef,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub proposal_id: usize,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddedBox {
    pub image_id: String,
    #[serde(flatten)]
    pub class: ClassRef,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub batch_id: String,
    pub decisions: Vec<Decision>,
    #[serde(default)]
    pub added_boxes: Vec<AddedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitReport {
    /// Boxes that became ground truth.
    pub accepted: usize,
    pub images: usize,
    pub new_classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub labeled_count: usize,
    /// Held-out mAP over all registered classes, when a held-out set exists.
    pub map: Option<f64>,
    pub per_class_ap: BTreeMap<String, f64>,
    pub mean_loss: f64,
    pub iterations: usize,
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub step: usize,
    /// `initial` for the first training, `incremental` afterwards.
    pub kind: String,
    pub trained_images: usize,
    pub losses: Vec<f64>,
    pub duration_ms: u64,
    pub row: MetricsRow,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub unlabeled: usize,
    pub staged: usize,
    pub labeled: usize,
    pub heldout: usize,
}

impl PoolCounts {
    pub fn total(&self) -> usize {
        self.unlabeled + self.staged + self.labeled + self.heldout
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsView {
    pub rows: Vec<MetricsRow>,
    pub pools: PoolCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub id: String,
    pub name: String,
    pub classes: Vec<String>,
    pub metric: MetricKind,
    pub pools: PoolCounts,
    pub pending_batch: Option<String>,
    pub trainings: usize,
    pub events: u64,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub added: usize,
    pub skipped: usize,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestTarget {
    #[default]
    Unlabeled,
    Labeled,
    Heldout,
}

#[derive(Debug, Clone)]
pub struct UploadFile {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingBatch {
    batch_id: String,
    images: Vec<String>,
    proposals: Vec<Proposal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    id: String,
    config: ProjectConfig,
    classes: Vec<String>,
    images: BTreeMap<String, ImageEntry>,
    pending: Option<PendingBatch>,
    curve: Vec<MetricsRow>,
    selections: u64,
    trainings: usize,
    events: u64,
    model_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Event {
    seq: u64,
    kind: String,
    detail: serde_json::Value,
}

pub struct Project {
    dir: PathBuf,
    manifest: Manifest,
    model: DetectorModel,
    features: HashMap<String, CellFeatures>,
}

/// Read-only inputs for valuing the unlabeled pool.
pub struct SelectionJob {
    revision: u64,
    model: DetectorModel,
    config: ProjectConfig,
    classes: Vec<String>,
    selections: u64,
    pool: Vec<(String, CellFeatures)>,
}

pub struct SelectionOutcome {
    revision: u64,
    result: SelectionResult,
}

/// Everything a training run needs, detached from the project.
pub struct TrainingJob {
    model: DetectorModel,
    initial: bool,
    hyper: TrainHyper,
    lambda: f64,
    iterations: usize,
    seed: u64,
    old: Vec<PreparedScene>,
    staged_ids: Vec<String>,
    staged: Vec<PreparedScene>,
    heldout: Vec<PreparedScene>,
    classes: Vec<String>,
    step: usize,
    labeled_after: usize,
}

pub struct TrainingOutcome {
    model: DetectorModel,
    staged_ids: Vec<String>,
    report: TrainingReport,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn image_id(raster: &Raster) -> String {
    let mut h = Sha256::new();
    h.update((raster.width as u64).to_le_bytes());
    h.update((raster.height as u64).to_le_bytes());
    h.update(raster.to_rgb8());
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Project {
    /// Creates a fresh project in `dir`, which must not hold one already.
    pub fn create(dir: &Path, config: ProjectConfig) -> Result<Self> {
        config.validate()?;
        if dir.join(MANIFEST).exists() {
            return Err(ServiceError::Validation(format!("{} already holds a project", dir.display())));
        }
        fs::create_dir_all(dir.join(SCENES))?;
        let model = DetectorModel::zeros(config.grid())?;
        let manifest = Manifest {
            version: PROJECT_VERSION,
            id: uuid::Uuid::new_v4().to_string(),
            classes: config.classes.clone(),
            config,
            images: BTreeMap::new(),
            pending: None,
            curve: Vec::new(),
            selections: 0,
            trainings: 0,
            events: 0,
            model_sha256: String::new(),
        };
        File::create(dir.join(EVENTS))?;
        let mut project = Project { dir: dir.to_path_buf(), manifest, model, features: HashMap::new() };
        let detail = json!({ "id": project.manifest.id, "classes": project.manifest.classes });
        project.commit(vec![("create", detail)], true)?;
        Ok(project)
    }

    /// Reopens a project, finishing or discarding an interrupted model write.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bytes = fs::read(&path).map_err(|e| ServiceError::Corrupt { path: path.clone(), reason: e.to_string() })?;
        let manifest: Manifest = serde_json::from_slice(&bytes)
            .map_err(|e| ServiceError::Corrupt { path: path.clone(), reason: e.to_string() })?;
        if manifest.version != PROJECT_VERSION {
            return Err(ServiceError::Version { expected: PROJECT_VERSION, found: manifest.version });
        }
        let next = dir.join(MODEL_NEXT);
        if next.exists() {
            if sha256_hex(&fs::read(&next)?) == manifest.model_sha256 {
                fs::rename(&next, dir.join(MODEL))?;
            } else {
                fs::remove_file(&next)?;
            }
        }
        let model_path = dir.join(MODEL);
        let model_bytes = fs::read(&model_path)?;
        if sha256_hex(&model_bytes) != manifest.model_sha256 {
            return Err(ServiceError::Corrupt { path: model_path, reason: "model digest does not match manifest".into() });
        }
        let model = DetectorModel::from_bytes(&model_bytes, &model_path.display().to_string())?;
        truncate_events(&dir.join(EVENTS), manifest.events)?;
        let mut project = Project { dir: dir.to_path_buf(), manifest, model, features: HashMap::new() };
        let ids: Vec<String> = project.manifest.images.keys().cloned().collect();
        for id in ids {
            let raster = project.raster(&id)?;
            let f = project.model.extract_features(&raster)?;
            project.features.insert(id, f);
        }
        Ok(project)
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn config(&self) -> &ProjectConfig {
        &self.manifest.config
    }

    pub fn images(&self) -> &BTreeMap<String, ImageEntry> {
        &self.manifest.images
    }

    pub fn features(&self, image_id: &str) -> Option<&CellFeatures> {
        self.features.get(image_id)
    }

    pub fn pools(&self) -> PoolCounts {
        let mut c = PoolCounts::default();
        for e in self.manifest.images.values() {
            match e.pool {
                Pool::Unlabeled => c.unlabeled += 1,
                Pool::Staged => c.staged += 1,
                Pool::Labeled => c.labeled += 1,
                Pool::Heldout => c.heldout += 1,
            }
        }
        c
    }

    /// SHA-256 over the manifest, which itself pins the model digest.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(&self.manifest).expect("manifest serializes"))
    }

    /// Sequence number of the last event; bumps on every mutation.
    pub fn revision(&self) -> u64 {
        self.manifest.events
    }

    pub fn summary(&self) -> ProjectSummary {
        ProjectSummary {
            id: self.manifest.id.clone(),
            name: self.manifest.config.name.clone(),
            classes: self.manifest.classes.clone(),
            metric: self.manifest.config.metric,
            pools: self.pools(),
            pending_batch: self.manifest.pending.as_ref().map(|p| p.batch_id.clone()),
            trainings: self.manifest.trainings,
            events: self.manifest.events,
            digest: self.digest(),
        }
    }

    pub fn metrics(&self) -> MetricsView {
        MetricsView { rows: self.manifest.curve.clone(), pools: self.pools() }
    }

    pub fn image_png(&self, image_id: &str) -> Result<Vec<u8>> {
        if !self.manifest.images.contains_key(image_id) {
            return Err(ServiceError::NotFound { kind: "image", id: image_id.into() });
        }
        Ok(fs::read(self.scene_path(image_id))?)
    }

    fn scene_path(&self, image_id: &str) -> PathBuf {
        self.dir.join(SCENES).join(format!("{image_id}.png"))
    }

    fn raster(&self, image_id: &str) -> Result<Raster> {
        let path = self.scene_path(image_id);
        Raster::from_png_bytes(&fs::read(&path)?)
            .map_err(|e| ServiceError::Corrupt { path, reason: e.to_string() })
    }

    /// Appends events, stages the model, then rewrites the manifest.
    fn commit(&mut self, events: Vec<(&str, serde_json::Value)>, model_changed: bool) -> Result<()> {
        if model_changed {
            let bytes = self.model.to_bytes();
            self.manifest.model_sha256 = sha256_hex(&bytes);
            write_atomic(&self.dir.join(MODEL_NEXT), &bytes)?;
        }
        let mut log = OpenOptions::new().append(true).create(true).open(self.dir.join(EVENTS))?;
        for (kind, detail) in events {
            self.manifest.events += 1;
            let event = Event { seq: self.manifest.events, kind: kind.to_string(), detail };
            serde_json::to_writer(&mut log, &event)?;
            log.write_all(b"\n")?;
        }
        log.sync_all()?;
        write_atomic(&self.dir.join(MANIFEST), &serde_json::to_vec_pretty(&self.manifest)?)?;
        if model_changed {
            fs::rename(self.dir.join(MODEL_NEXT), self.dir.join(MODEL))?;
        }
        Ok(())
    }

    fn check_class(&self, class_id: usize, origin: &str) -> Result<()> {
        if class_id >= self.manifest.classes.len() {
            return Err(ServiceError::Validation(format!("{origin}: unknown class id {class_id}")));
        }
        Ok(())
    }

    /// Adds uploaded scenes to a pool. Sidecars (`.json`) name their PNG;
    /// a PNG without a sidecar is an unlabeled image. Nothing is stored
    /// unless every file parses.
    pub fn ingest(&mut self, files: Vec<UploadFile>, target: IngestTarget) -> Result<IngestReport> {
        let by_name: HashMap<&str, &UploadFile> = files.iter().map(|f| (f.name.as_str(), f)).collect();
        if by_name.len() != files.len() {
            return Err(ServiceError::Validation("duplicate file names in upload".into()));
        }
        let mut referenced = BTreeSet::new();
        let mut scenes: Vec<(String, Raster, Option<Vec<GroundTruthBox>>)> = Vec::new();
        let size = self.manifest.config.image_size;
        let parse_png = |f: &UploadFile| -> Result<Raster> {
            let r = Raster::from_png_bytes(&f.bytes)
                .map_err(|e| ServiceError::Validation(format!("{}: not a PNG scene ({e})", f.name)))?;
            if r.width != size || r.height != size {
                return Err(ServiceError::Validation(format!(
                    "{}: image is {}x{}, project expects {size}x{size}",
                    f.name, r.width, r.height
                )));
            }
            Ok(r)
        };
        for f in files.iter().filter(|f| f.name.ends_with(".json")) {
            let record: SceneRecord = serde_json::from_slice(&f.bytes)
                .map_err(|e| ServiceError::Validation(format!("{}: malformed scene sidecar ({e})", f.name)))?;
            let image = by_name
                .get(record.image.as_str())
                .ok_or_else(|| ServiceError::Validation(format!("{}: image {} missing from upload", f.name, record.image)))?;
            let raster = parse_png(image)?;
            if let Some(boxes) = &record.boxes {
                for b in boxes {
                    if !b.is_inside_image() {
                        return Err(ServiceError::Validation(format!("{}: box outside the image", f.name)));
                    }
                    self.check_class(b.class_id, &f.name)?;
                }
            }
            referenced.insert(record.image.clone());
            scenes.push((f.name.clone(), raster, record.boxes));
        }
        for f in &files {
            if f.name.ends_with(".json") || referenced.contains(&f.name) {
                continue;
            }
            if !f.name.ends_with(".png") {
                return Err(ServiceError::Validation(format!("{}: expected a .png image or .json sidecar", f.name)));
            }
            scenes.push((f.name.clone(), parse_png(f)?, None));
        }
        if target != IngestTarget::Unlabeled {
            if let Some((name, _, _)) = scenes.iter().find(|s| s.2.is_none()) {
                return Err(ServiceError::Validation(format!("{name}: labeled and held-out scenes need ground truth")));
            }
        }

        let pool = match target {
            IngestTarget::Unlabeled => Pool::Unlabeled,
            IngestTarget::Labeled => Pool::Labeled,
            IngestTarget::Heldout => Pool::Heldout,
        };
        let mut added = Vec::new();
        let mut skipped = 0;
        for (source, raster, boxes) in scenes {
            let id = image_id(&raster);
            if self.manifest.images.contains_key(&id) || added.iter().any(|(a, _, _)| a == &id) {
                skipped += 1;
                continue;
            }
            let boxes = if pool == Pool::Unlabeled { Vec::new() } else { boxes.unwrap_or_default() };
            added.push((id, raster, ImageEntry { pool, source, boxes, negative_cells: Vec::new() }));
        }
        let mut ids = Vec::new();
        for (id, raster, entry) in added {
            fs::write(self.scene_path(&id), raster.to_png_bytes()?)?;
            self.features.insert(id.clone(), self.model.extract_features(&raster)?);
            self.manifest.images.insert(id.clone(), entry);
            ids.push(id);
        }
        let detail = json!({ "target": target, "added": ids, "skipped": skipped });
        self.commit(vec![("ingest", detail)], false)?;
        Ok(IngestReport { added: ids.len(), skipped, image_ids: ids })
    }

    pub fn selection_job(&self) -> Result<SelectionJob> {
        let pool: Vec<(String, CellFeatures)> = self
            .manifest
            .images
            .iter()
            .filter(|(_, e)| e.pool == Pool::Unlabeled)
            .map(|(id, _)| (id.clone(), self.features[id].clone()))
            .collect();
        if pool.is_empty() {
            return Err(ServiceError::Validation("unlabeled pool is empty".into()));
        }
        Ok(SelectionJob {
            revision: self.revision(),
            model: self.model.clone(),
            config: self.manifest.config.clone(),
            classes: self.manifest.classes.clone(),
            selections: self.manifest.selections,
            pool,
        })
    }

    /// Records the proposed batch, replacing any unsubmitted one.
    pub fn install_selection(&mut self, outcome: SelectionOutcome) -> Result<SelectionResult> {
        if outcome.revision != self.revision() {
            return Err(ServiceError::Stale("project changed while the pool was being valued; select again".into()));
        }
        let result = outcome.result;
        let replaced = self.manifest.pending.as_ref().map(|p| p.batch_id.clone());
        self.manifest.selections += 1;
        self.manifest.pending = Some(PendingBatch {
            batch_id: result.batch_id.clone(),
            images: result.images.iter().map(|i| i.image_id.clone()).collect(),
            proposals: result.images.iter().flat_map(|i| i.proposals.clone()).collect(),
        });
        let detail = json!({
            "batch_id": result.batch_id,
            "images": self.manifest.pending.as_ref().map(|p| p.images.clone()),
            "batch_value": result.batch_value,
            "replaced": replaced,
        });
        self.commit(vec![("select", detail)], false)?;
        Ok(result)
    }

    pub fn propose_batch(&mut self) -> Result<SelectionResult> {
        let outcome = self.selection_job()?.run()?;
        self.install_selection(outcome)
    }

    fn resolve_class(&self, class: &ClassRef, new_names: &mut Vec<String>, origin: &str) -> Result<usize> {
        match (class.class_id, &class.class_name) {
            (Some(id), None) => {
                self.check_class(id, origin)?;
                Ok(id)
            }
            (None, Some(name)) => {
                let name = name.trim();
                if name.is_empty() {
                    return Err(ServiceError::Validation(format!("{origin}: empty class name")));
                }
                if let Some(i) = self.manifest.classes.iter().position(|c| c == name) {
                    return Ok(i);
                }
                let pos = match new_names.iter().position(|c| c == name) {
                    Some(p) => p,
                    None => {
                        new_names.push(name.to_string());
                        new_names.len() - 1
                    }
                };
                Ok(self.manifest.classes.len() + pos)
            }
            _ => Err(ServiceError::Validation(format!("{origin}: give exactly one of class_id and class_name"))),
        }
    }

    /// Applies decisions for the pending batch; all-or-nothing.
    pub fn submit_labels(&mut self, submission: LabelSubmission) -> Result<SubmitReport> {
        let pending = match &self.manifest.pending {
            Some(p) if p.batch_id == submission.batch_id => p.clone(),
            Some(p) => {
                return Err(ServiceError::Stale(format!(
                    "batch {} is not the proposed batch {}",
                    submission.batch_id, p.batch_id
                )))
            }
            None => return Err(ServiceError::Stale(format!("batch {} is not pending", submission.batch_id))),
        };
        let mut seen = BTreeSet::new();
        for d in &submission.decisions {
            if d.proposal_id >= pending.proposals.len() {
                return Err(ServiceError::Validation(format!("unknown proposal id {}", d.proposal_id)));
            }
            if !seen.insert(d.proposal_id) {
                return Err(ServiceError::Validation(format!("proposal {} decided twice", d.proposal_id)));
            }
        }
        if seen.len() != pending.proposals.len() {
            let missing: Vec<usize> = (0..pending.proposals.len()).filter(|i| !seen.contains(i)).collect();
            return Err(ServiceError::Validation(format!("missing decisions for proposals {missing:?}")));
        }

        let mut new_names = Vec::new();
        let mut kept: BTreeMap<&str, Vec<GroundTruthBox>> = pending.images.iter().map(|i| (i.as_str(), Vec::new())).collect();
        let mut rejected: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for d in &submission.decisions {
            let p = &pending.proposals[d.proposal_id];
            let origin = format!("proposal {}", d.proposal_id);
            let class_id = match &d.action {
                Action::Confirm => Some(p.class_id),
                Action::Reject => None,
                Action::Reassign { class } => Some(self.resolve_class(class, &mut new_names, &origin)?),
            };
            match class_id {
                Some(c) => kept.get_mut(p.image_id.as_str()).expect("batch image").push(GroundTruthBox::new(c, p.bbox)),
                None => {
                    rejected.entry(p.image_id.as_str()).or_default().insert(p.cell);
                }
            }
        }
        for (i, b) in submission.added_boxes.iter().enumerate() {
            let origin = format!("added box {i}");
            let Some(list) = kept.get_mut(b.image_id.as_str()) else {
                return Err(ServiceError::Validation(format!("{origin}: image {} is not in the batch", b.image_id)));
            };
            let gt = GroundTruthBox::new(0, b.bbox);
            if !b.bbox.is_finite() || !gt.is_inside_image() {
                return Err(ServiceError::Validation(format!("{origin}: box must lie inside the image")));
            }
            let c = self.resolve_class(&b.class, &mut new_names, &origin)?;
            list.push(GroundTruthBox::new(c, b.bbox));
        }

        for _ in &new_names {
            self.model.add_class();
        }
        self.manifest.classes.extend(new_names.iter().cloned());
        let grid = self.model.config().clone();
        let mut accepted = 0;
        for (image_id, boxes) in &kept {
            let occupied: BTreeSet<usize> = boxes.iter().map(|b| grid.cell_of(b.cx, b.cy)).collect();
            let negatives = rejected.get(image_id).map(|s| s.difference(&occupied).copied().collect()).unwrap_or_default();
            accepted += boxes.len();
            let entry = self.manifest.images.get_mut(*image_id).expect("batch image is registered");
            entry.pool = Pool::Staged;
            entry.boxes = boxes.clone();
            entry.negative_cells = negatives;
        }
        self.manifest.pending = None;
        let mut events: Vec<(&str, serde_json::Value)> = submission
            .decisions
            .iter()
            .map(|d| ("decision", json!({ "batch_id": submission.batch_id, "decision": d })))
            .collect();
        for b in &submission.added_boxes {
            events.push(("added_box", json!({ "batch_id": submission.batch_id, "box": b })));
        }
        for name in &new_names {
            events.push(("class_registered", json!({ "name": name })));
        }
        events.push(("submit", json!({ "batch_id": submission.batch_id, "accepted": accepted })));
        self.commit(events, !new_names.is_empty())?;
        Ok(SubmitReport { accepted, images: kept.len(), new_classes: new_names })
    }

    fn prepared(&self, pool: Pool) -> (Vec<String>, Vec<PreparedScene>) {
        self.manifest
            .images
            .iter()
            .filter(|(_, e)| e.pool == pool)
            .map(|(id, e)| {
                let scene = PreparedScene {
                    features: self.features[id].clone(),
                    boxes: e.boxes.clone(),
                    negative_cells: e.negative_cells.clone(),
                };
                (id.clone(), scene)
            })
            .unzip()
    }

    pub fn training_job(&self) -> Result<TrainingJob> {
        let (staged_ids, staged) = self.prepared(Pool::Staged);
        if staged.is_empty() {
            return Err(ServiceError::Validation("nothing staged for training".into()));
        }
        let (_, old) = self.prepared(Pool::Labeled);
        let (_, heldout) = self.prepared(Pool::Heldout);
        let c = &self.manifest.config;
        let step = self.manifest.trainings;
        Ok(TrainingJob {
            model: self.model.clone(),
            initial: step == 0,
            hyper: c.initial,
            lambda: c.lambda,
            iterations: c.update_iterations,
            seed: if step == 0 {
                seeds::derive(c.seed, seeds::STREAM_INIT_TRAIN, 0)
            } else {
                seeds::derive(c.seed, seeds::STREAM_UPDATE, step as u64)
            },
            labeled_after: old.len() + staged.len(),
            old,
            staged_ids,
            staged,
            heldout,
            classes: self.manifest.classes.clone(),
            step: step + 1,
        })
    }

    /// Installs a trained model and moves its staged images to the labeled
    /// pool. Any pending batch was valued by the old model and is dropped.
    pub fn finish_training(&mut self, outcome: TrainingOutcome) -> Result<TrainingReport> {
        if outcome.model.num_classes() != self.manifest.classes.len() {
            return Err(ServiceError::Stale("class registry changed during training".into()));
        }
        for id in &outcome.staged_ids {
            if let Some(e) = self.manifest.images.get_mut(id) {
                e.pool = Pool::Labeled;
            }
        }
        self.model = outcome.model;
        self.manifest.trainings += 1;
        self.manifest.pending = None;
        self.manifest.curve.push(outcome.report.row.clone());
        let r = &outcome.report;
        let detail = json!({
            "step": r.step,
            "kind": r.kind,
            "trained_images": r.trained_images,
            "final_loss": r.losses.last(),
            "map": r.row.map,
        });
        self.commit(vec![("train", detail)], true)?;
        Ok(outcome.report)
    }

    pub fn train(&mut self) -> Result<TrainingReport> {
        let outcome = self.training_job()?.run()?;
        self.finish_training(outcome)
    }
}

impl SelectionJob {
    /// Values every batch of a fresh seeded partition and proposes boxes
    /// for the best one (ties to the lowest batch index).
    pub fn run(self) -> Result<SelectionOutcome> {
        let c = &self.config;
        let index = self.selections;
        let partition = partition_unlabeled(
            self.pool.len(),
            c.batch_size,
            seeds::derive(c.seed, seeds::STREAM_PARTITION, index),
        )?;
        let random_seed = seeds::derive(c.seed, seeds::STREAM_RANDOM_METRIC, index);
        let values = self
            .pool
            .iter()
            .enumerate()
            .map(|(i, (_, f))| value_image(c.metric, &self.model, f, random_seed, i as u64))
            .collect::<alkit_core::Result<Vec<f64>>>()?;
        let batch_values: Vec<f64> =
            partition.iter().map(|b| value_batch(&b.iter().map(|&i| values[i]).collect::<Vec<_>>())).collect();
        let mut best = 0;
        for (i, v) in batch_values.iter().enumerate() {
            if *v > batch_values[best] {
                best = i;
            }
        }
        let grid = self.model.config();
        let mut next_id = 0;
        let mut images = Vec::new();
        for &i in &partition[best] {
            let (id, features) = &self.pool[i];
            let out = self.model.forward_features(features)?;
            let proposals = decode(&out, grid.confidence_threshold, grid.nms_iou)
                .into_iter()
                .map(|d| {
                    let class_id = d.class_id();
                    next_id += 1;
                    Proposal {
                        id: next_id - 1,
                        image_id: id.clone(),
                        class_id,
                        class_name: self.classes[class_id].clone(),
                        class_distribution: d.class_distribution,
                        confidence: d.confidence,
                        bbox: d.bbox,
                        cell: d.cell,
                    }
                })
                .collect();
            images.push(SelectedImage { image_id: id.clone(), value: values[i], proposals });
        }
        let result = SelectionResult {
            batch_id: format!("batch-{}", index + 1),
            metric: c.metric,
            images,
            batch_value: batch_values[best],
        };
        Ok(SelectionOutcome { revision: self.revision, result })
    }
}

impl TrainingJob {
    pub fn run(self) -> Result<TrainingOutcome> {
        let start = Instant::now();
        let mut model = self.model;
        let report = if self.initial {
            let mut all = self.old;
            all.extend(self.staged.iter().cloned());
            train_initial(&mut model, &all, self.hyper, self.seed)?
        } else {
            incremental_update(&mut model, &self.old, &self.staged, self.lambda, self.iterations, self.seed)?
        };
        if !model.is_finite() {
            return Err(ServiceError::Core(alkit_core::Error::Numerical("training produced non-finite weights".into())));
        }
        let (map, per_class_ap) = if self.heldout.is_empty() {
            (None, BTreeMap::new())
        } else {
            let r = evaluate_map(&model, &self.heldout, 0.5)?;
            let per_class =
                r.per_class_ap.iter().map(|(&c, &ap)| (self.classes[c].clone(), ap)).collect::<BTreeMap<_, _>>();
            (Some(r.map_over(0..self.classes.len())), per_class)
        };
        let duration_ms = start.elapsed().as_millis() as u64;
        let n = report.losses.len();
        let row = MetricsRow {
            step: self.step,
            labeled_count: self.labeled_after,
            map,
            per_class_ap,
            mean_loss: if n == 0 { 0.0 } else { report.mean_loss(0..n) },
            iterations: n,
            duration_ms,
        };
        Ok(TrainingOutcome {
            model,
            staged_ids: self.staged_ids,
            report: TrainingReport {
                step: self.step,
                kind: if self.initial { "initial" } else { "incremental" }.into(),
                trained_images: self.staged.len(),
                losses: report.losses,
                duration_ms,
                row,
            },
        })
    }
}

/// Drops log lines written after the last committed manifest.
fn truncate_events(path: &Path, committed: u64) -> Result<()> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    if lines.len() as u64 > committed {
        let kept: String = lines[..committed as usize].iter().map(|l| format!("{l}\n")).collect();
        write_atomic(path, kept.as_bytes())?;
    }
    Ok(())
}
