//! Annotation service for the propose-and-confirm loop.
//!
//! A [`Project`] owns the pools, the class registry and the detector. The
//! [`router`] exposes it over HTTP+JSON; errors come back as
//! `{code, message}` with 400, 404 or 409 where applicable.

pub mod api;
pub mod error;
pub mod project;

pub use api::{router, serve, serve_listener, AppState};
pub use error::{ErrorBody, Result, ServiceError};
pub use project::{
    Action, AddedBox, ClassRef, Decision, ImageEntry, IngestReport, IngestTarget, LabelSubmission, MetricsRow,
    MetricsView, Pool, PoolCounts, Project, ProjectConfig, ProjectSummary, Proposal, SelectedImage, SelectionResult,
    SubmitReport, TrainingReport, UploadFile,
};
