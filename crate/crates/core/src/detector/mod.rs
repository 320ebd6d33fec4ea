//! Miniature single-pass grid detector.
//!
//! The image is split into `cells_x * cells_y` cells. Every cell sees a
//! pooled pixel patch of itself plus a context margin, and three linear
//! heads shared across cells predict class logits, per-box confidence
//! logits and per-box geometry.

mod config;
mod eval;
mod grid;
mod model;
mod persist;
mod train;

pub use config::{GridConfig, TrainHyper};
pub use eval::{average_precision, evaluate_detections, evaluate_map, MapResult};
pub use grid::{decode, non_max_suppression, Detection, GridOutput};
pub use model::{CellFeatures, DetectorModel};
pub use persist::MODEL_MAGIC;
pub use train::{
    assign_targets, incremental_update, loss_and_grad, minibatch_loss_and_grad, train_initial,
    Draw, MixingSampler, PreparedScene, SceneTargets, SlotTarget, TrainReport,
};
