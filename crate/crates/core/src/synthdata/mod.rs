//! Synthetic data: detection scenes built from procedural shapes, and
//! clustered feature vectors with rejection populations.

mod features;
mod io;
mod scene;

pub use features::{generate_feature_clusters, FeatureClusterSpec, FeatureDataset, FeaturePoint, PointLabel};
pub use io::{load_dataset, load_scene, save_dataset, save_scene, DatasetManifest, SceneRecord};
pub use scene::{
    generate_dataset, generate_scene, render_scene, split_known_new, GroundTruthBox, Placement, Raster,
    Scene, SceneSpec, Shape,
};
