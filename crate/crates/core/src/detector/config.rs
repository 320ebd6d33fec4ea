use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Horizontal cell count.
    pub cells_x: usize,
    /// Vertical cell count.
    pub cells_y: usize,
    pub boxes_per_cell: usize,
    pub num_classes: usize,
    /// Extra pixels of context around each cell patch.
    pub context_margin: usize,
    /// Average-pooling factor applied to the patch.
    pub pool: usize,
    pub confidence_threshold: f64,
    pub nms_iou: f64,
}

impl GridConfig {
    pub fn new(image_size: usize, num_classes: usize) -> Self {
        Self {
            image_width: image_size,
            image_height: image_size,
            cells_x: 6,
            cells_y: 6,
            boxes_per_cell: 1,
            num_classes,
            context_margin: 4,
            pool: 4,
            confidence_threshold: 0.2,
            nms_iou: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.cells_x == 0 || self.cells_y == 0 || self.boxes_per_cell == 0 || self.num_classes == 0 {
            return fail("grid dimensions, boxes per cell and class count must be at least 1".into());
        }
        if self.pool == 0 {
            return fail("pool factor must be at least 1".into());
        }
        if self.image_width % self.cells_x != 0 || self.image_height % self.cells_y != 0 {
            return fail(format!(
                "image {}x{} is not divisible into {}x{} cells",
                self.image_width, self.image_height, self.cells_x, self.cells_y
            ));
        }
        if self.patch_width() % self.pool != 0 || self.patch_height() % self.pool != 0 {
            return fail(format!(
                "patch {}x{} is not divisible by pool factor {}",
                self.patch_width(),
                self.patch_height(),
                self.pool
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return fail("thresholds must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    pub fn cell_width(&self) -> usize {
        self.image_width / self.cells_x
    }

    pub fn cell_height(&self) -> usize {
        self.image_height / self.cells_y
    }

    pub fn patch_width(&self) -> usize {
        self.cell_width() + 2 * self.context_margin
    }

    pub fn patch_height(&self) -> usize {
        self.cell_height() + 2 * self.context_margin
    }

    pub fn feature_dim(&self) -> usize {
        (self.patch_width() / self.pool) * (self.patch_height() / self.pool) * 3
    }

    /// Cell holding a normalized point; points on a boundary go to the lower index.
    pub fn cell_of(&self, cx: f64, cy: f64) -> usize {
        let col = boundary_low_index(cx, self.cells_x);
        let row = boundary_low_index(cy, self.cells_y);
        row * self.cells_x + col
    }
}

fn boundary_low_index(v: f64, n: usize) -> usize {
    let scaled = (v * n as f64).ceil() - 1.0;
    (scaled.max(0.0) as usize).min(n - 1)
}

/// SGD hyperparameters; a snapshot is stored with the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub iterations: usize,
    pub minibatch: usize,
    pub weight_decay: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            iterations: 5000,
            minibatch: 16,
            weight_decay: 1e-4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_feature_dim() {
        let c = GridConfig::new(96, 7);
        c.validate().unwrap();
        assert_eq!(c.cell_width(), 16);
        assert_eq!(c.feature_dim(), 6 * 6 * 3);
    }

    #[test]
    fn boundary_points_go_to_lowest_cell() {
        let c = GridConfig::new(96, 3);
        assert_eq!(c.cell_of(0.0, 0.0), 0);
        assert_eq!(c.cell_of(1.0 / 6.0, 0.01), 0);
        assert_eq!(c.cell_of(1.0 / 6.0 + 1e-9, 0.01), 1);
        assert_eq!(c.cell_of(1.0, 1.0), 35);
    }

    #[test]
    fn rejects_indivisible_grid() {
        let mut c = GridConfig::new(96, 3);
        c.cells_x = 5;
        assert!(c.validate().is_err());
        let mut c = GridConfig::new(96, 3);
        c.confidence_threshold = 1.5;
        assert!(c.validate().is_err());
    }
}
