use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::{Error, Result};

/// Raw detector output: per-cell class distributions, per-(cell, box)
/// confidences and geometry `(dx, dy, w, h)`, where `dx, dy` are offsets
/// of the box center from the cell center in cell units and `w, h` are
/// normalized image extents.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutput {
    cells_x: usize,
    cells_y: usize,
    boxes_per_cell: usize,
    num_classes: usize,
    class_scores: Vec<f64>,
    confidences: Vec<f64>,
    geometry: Vec<[f64; 4]>,
}

impl GridOutput {
    pub fn new(
        cells_x: usize,
        cells_y: usize,
        boxes_per_cell: usize,
        num_classes: usize,
        class_scores: Vec<f64>,
        confidences: Vec<f64>,
        geometry: Vec<[f64; 4]>,
    ) -> Result<Self> {
        let cells = cells_x * cells_y;
        if class_scores.len() != cells * num_classes {
            return Err(Error::DimensionMismatch {
                expected: cells * num_classes,
                actual: class_scores.len(),
            });
        }
        if confidences.len() != cells * boxes_per_cell || geometry.len() != cells * boxes_per_cell {
            return Err(Error::DimensionMismatch {
                expected: cells * boxes_per_cell,
                actual: confidences.len().min(geometry.len()),
            });
        }
        for cell in class_scores.chunks(num_classes.max(1)) {
            let sum: f64 = cell.iter().sum();
            if cell.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument("class scores must be a distribution per cell".into()));
            }
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument("confidences must lie in [0, 1]".into()));
        }
        Ok(Self {
            cells_x,
            cells_y,
            boxes_per_cell,
            num_classes,
            class_scores,
            confidences,
            geometry,
        })
    }

    pub fn cells_x(&self) -> usize {
        self.cells_x
    }
    pub fn cells_y(&self) -> usize {
        self.cells_y
    }
    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }
    pub fn boxes_per_cell(&self) -> usize {
        self.boxes_per_cell
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_scores(&self, cell: usize) -> &[f64] {
        &self.class_scores[cell * self.num_classes..(cell + 1) * self.num_classes]
    }

    pub fn confidence(&self, cell: usize, slot: usize) -> f64 {
        self.confidences[cell * self.boxes_per_cell + slot]
    }

    /// `max_j C_{i,j}` over the boxes of a cell.
    pub fn max_confidence(&self, cell: usize) -> f64 {
        (0..self.boxes_per_cell)
            .map(|j| self.confidence(cell, j))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn geometry(&self, cell: usize, slot: usize) -> [f64; 4] {
        self.geometry[cell * self.boxes_per_cell + slot]
    }

    /// Absolute normalized box predicted by `(cell, slot)`.
    pub fn bbox(&self, cell: usize, slot: usize) -> BBox {
        let [dx, dy, w, h] = self.geometry(cell, slot);
        let (col, row) = (cell % self.cells_x, cell / self.cells_x);
        BBox::new(
            (col as f64 + 0.5 + dx) / self.cells_x as f64,
            (row as f64 + 0.5 + dy) / self.cells_y as f64,
            w,
            h,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_distribution: Vec<f64>,
    pub confidence: f64,
    pub cell: usize,
    pub slot: usize,
}

impl Detection {
    /// Most probable class; ties go to the lowest index.
    pub fn class_id(&self) -> usize {
        argmax(&self.class_distribution)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Keeps entries with confidence at least `tau`, then greedy per-class NMS.
/// Output is sorted by confidence, descending.
pub fn decode(grid: &GridOutput, tau: f64, nms_iou: f64) -> Vec<Detection> {
    let mut candidates = Vec::new();
    for cell in 0..grid.num_cells() {
        for slot in 0..grid.boxes_per_cell() {
            let confidence = grid.confidence(cell, slot);
            if confidence >= tau {
                candidates.push(Detection {
                    bbox: grid.bbox(cell, slot),
                    class_distribution: grid.class_scores(cell).to_vec(),
                    confidence,
                    cell,
                    slot,
                });
            }
        }
    }
    non_max_suppression(candidates, nms_iou)
}

/// Greedy NMS within each predicted class: a candidate is dropped when it
/// overlaps an already kept, higher-ranked detection by more than `iou`.
pub fn non_max_suppression(mut candidates: Vec<Detection>, iou: f64) -> Vec<Detection> {
    candidates.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.cell.cmp(&b.cell))
            .then(a.slot.cmp(&b.slot))
    });
    let mut kept: Vec<Detection> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let class = cand.class_id();
        let suppressed = kept
            .iter()
            .any(|k| k.class_id() == class && k.bbox.iou(&cand.bbox) > iou);
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}
