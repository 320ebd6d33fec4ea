//! One-vs-all Gaussian process regression with closed-form updates, and
//! the expected model output change (EMOC) selection criterion.

mod cache;
mod chol;
mod discovery;
mod emoc;
mod kernel;
mod model;

pub use cache::PosteriorCache;
pub use chol::Cholesky;
pub use discovery::{
    mean_discovered, run_discovery, run_discovery_sweep, write_discovery_csv, DiscoveryConfig,
    DiscoveryMethod, DiscoveryRow, DiscoveryRun,
};
pub use emoc::{
    baseline_value, delta_model_output, emoc, emoc_density, emoc_with_rejection, label_change_sum,
    mc_class_probabilities, parzen_density, Baseline, EmocConfig, RejectionModel,
};
pub use kernel::Kernel;
pub use model::{GpLabel, GpModel, PosteriorPrediction};
