use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates, center + extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.x1().min(other.x1()) - self.x0().max(other.x0());
        let ih = self.y1().min(other.y1()) - self.y0().max(other.y0());
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union; 0 when both boxes are degenerate.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}
