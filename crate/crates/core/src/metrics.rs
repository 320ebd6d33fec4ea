//! Image selection metrics for active learning on detector outputs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{decode, CellFeatures, DetectorModel, GridOutput};
use crate::{seeds, Error, Result};

/// `1 - (p1 - p2)` for the two largest probabilities.
pub fn margin_1vs2(dist: &[f64]) -> Result<f64> {
    if dist.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "margin needs at least 2 classes, got {}",
            dist.len()
        )));
    }
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &p in dist {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    Ok((1.0 - (first - second)).clamp(0.0, 1.0))
}

pub fn aggregate_sum(values: &[f64]) -> f64 {
    values.iter().sum()
}

/// Mean, with an empty list valued zero.
pub fn aggregate_avg(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        aggregate_sum(values) / values.len() as f64
    }
}

/// Maximum, with an empty list valued zero.
pub fn aggregate_max(values: &[f64]) -> f64 {
    values.iter().copied().fold(0.0, f64::max)
}

fn cell_max_class(grid: &GridOutput, cell: usize) -> f64 {
    grid.class_scores(cell).iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `Σ_i (max_j C_ij - max_c p_i(c))^2` over all cells.
pub fn det_class_diff(grid: &GridOutput) -> f64 {
    (0..grid.num_cells())
        .map(|i| {
            let d = grid.max_confidence(i) - cell_max_class(grid, i);
            d * d
        })
        .sum()
}

/// `Σ_i (max_j C_ij * margin(p_i))^2` over all cells.
pub fn weighted_cell_sum(grid: &GridOutput) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..grid.num_cells() {
        let v = grid.max_confidence(i) * margin_1vs2(grid.class_scores(i))?;
        total += v * v;
    }
    Ok(total)
}

/// Sum of image values within a batch.
pub fn value_batch(image_values: &[f64]) -> f64 {
    aggregate_sum(image_values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Sum,
    Avg,
    Max,
    DetClassDiff,
    WeightedCellSum,
    Random,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Sum,
        MetricKind::Avg,
        MetricKind::Max,
        MetricKind::DetClassDiff,
        MetricKind::WeightedCellSum,
        MetricKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sum => "sum",
            MetricKind::Avg => "avg",
            MetricKind::Max => "max",
            MetricKind::DetClassDiff => "det_class_diff",
            MetricKind::WeightedCellSum => "weighted_cell_sum",
            MetricKind::Random => "random",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

/// Per-detection margins aggregated over the decoded detections.
fn aggregated_margins(model: &DetectorModel, grid: &GridOutput, reduce: fn(&[f64]) -> f64) -> Result<f64> {
    let c = model.config();
    let margins = decode(grid, c.confidence_threshold, c.nms_iou)
        .iter()
        .map(|d| margin_1vs2(&d.class_distribution))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(&margins))
}

/// Value of one unlabeled image. `key` identifies the image so that the
/// random baseline is reproducible: the draw depends only on `(seed, key)`.
pub fn value_image(
    metric: MetricKind,
    model: &DetectorModel,
    features: &CellFeatures,
    seed: u64,
    key: u64,
) -> Result<f64> {
    if metric == MetricKind::Random {
        return Ok(seeds::derived_rng(seed, seeds::STREAM_RANDOM_METRIC, key).random::<f64>());
    }
    let grid = model.forward_features(features)?;
    match metric {
        MetricKind::Sum => aggregated_margins(model, &grid, aggregate_sum),
        MetricKind::Avg => aggregated_margins(model, &grid, aggregate_avg),
        MetricKind::Max => aggregated_margins(model, &grid, aggregate_max),
        MetricKind::DetClassDiff => Ok(det_class_diff(&grid)),
        MetricKind::WeightedCellSum => weighted_cell_sum(&grid),
        MetricKind::Random => unreachable!(),
    }
}
