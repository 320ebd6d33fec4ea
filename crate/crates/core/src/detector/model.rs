use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{GridConfig, TrainHyper};
use super::grid::GridOutput;
use crate::synthdata::Raster;
use crate::{seeds, Error, Result};

/// Raw (unnormalized) pooled patch features, one row of `dim` per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    pub dim: usize,
    pub cells: usize,
    pub data: Vec<f32>,
}

impl CellFeatures {
    #[inline]
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Offsets of the parameter blocks inside the flat parameter vector, in
/// declared order: class weights, class bias, confidence weights,
/// confidence bias, geometry weights, geometry bias.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub d: usize,
    pub k: usize,
    pub b: usize,
}

impl Layout {
    pub fn class_w(&self) -> usize {
        0
    }
    pub fn class_b(&self) -> usize {
        self.k * self.d
    }
    pub fn conf_w(&self) -> usize {
        self.class_b() + self.k
    }
    pub fn conf_b(&self) -> usize {
        self.conf_w() + self.b * self.d
    }
    pub fn geom_w(&self) -> usize {
        self.conf_b() + self.b
    }
    pub fn geom_b(&self) -> usize {
        self.geom_w() + 4 * self.b * self.d
    }
    pub fn total(&self) -> usize {
        self.geom_b() + 4 * self.b
    }

    /// True for weight (not bias) entries, the ones subject to weight decay.
    pub fn is_weight(&self, idx: usize) -> bool {
        idx < self.class_b()
            || (self.conf_w()..self.conf_b()).contains(&idx)
            || (self.geom_w()..self.geom_b()).contains(&idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub(crate) config: GridConfig,
    pub(crate) params: Vec<f64>,
    pub(crate) feat_mean: Vec<f64>,
    pub(crate) feat_std: Vec<f64>,
    pub(crate) hyper: TrainHyper,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn dot(w: &[f64], z: &[f64]) -> f64 {
    w.iter().zip(z).map(|(a, b)| a * b).sum()
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl DetectorModel {
    /// All-zero weights with identity feature normalization.
    pub fn zeros(config: GridConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout {
            d: config.feature_dim(),
            k: config.num_classes,
            b: config.boxes_per_cell,
        };
        Ok(Self {
            params: vec![0.0; layout.total()],
            feat_mean: vec![0.0; layout.d],
            feat_std: vec![1.0; layout.d],
            hyper: TrainHyper::default(),
            config,
        })
    }

    /// Gaussian random weights, for tests and gradient checks.
    pub fn random(config: GridConfig, scale: f64, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = seeds::rng(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for p in model.params.iter_mut() {
            *p = normal.sample(&mut rng);
        }
        for (m, s) in model.feat_mean.iter_mut().zip(model.feat_std.iter_mut()) {
            *m = rng.random_range(0.0..0.5);
            *s = rng.random_range(0.2..1.0);
        }
        Ok(model)
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn hyper(&self) -> &TrainHyper {
        &self.hyper
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout {
            d: self.config.feature_dim(),
            k: self.config.num_classes,
            b: self.config.boxes_per_cell,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.feat_mean).chain(&self.feat_std).all(|v| v.is_finite())
    }

    /// Appends a class with zero weights; existing outputs keep their logits.
    pub fn add_class(&mut self) {
        let old = self.layout();
        let new = Layout { k: old.k + 1, ..old };
        let mut params = Vec::with_capacity(new.total());
        params.extend_from_slice(&self.params[..old.class_b()]);
        params.extend(std::iter::repeat_n(0.0, old.d));
        params.extend_from_slice(&self.params[old.class_b()..old.conf_w()]);
        params.push(0.0);
        params.extend_from_slice(&self.params[old.conf_w()..]);
        debug_assert_eq!(params.len(), new.total());
        self.params = params;
        self.config.num_classes += 1;
    }

    pub(crate) fn set_normalization(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        self.feat_mean = mean;
        self.feat_std = std;
    }

    /// Pools each cell patch (zero padded at the border) into raw features.
    pub fn extract_features(&self, image: &Raster) -> Result<CellFeatures> {
        let c = &self.config;
        if image.width != c.image_width || image.height != c.image_height {
            return Err(Error::DimensionMismatch {
                expected: c.image_width * c.image_height,
                actual: image.width * image.height,
            });
        }
        let (pw, ph, pool) = (c.patch_width() / c.pool, c.patch_height() / c.pool, c.pool);
        let dim = c.feature_dim();
        let norm = 1.0 / (pool * pool) as f32;
        let mut data = vec![0.0f32; dim * c.num_cells()];
        for row in 0..c.cells_y {
            for col in 0..c.cells_x {
                let cell = row * c.cells_x + col;
                let out = &mut data[cell * dim..(cell + 1) * dim];
                let x_start = (col * c.cell_width()) as isize - c.context_margin as isize;
                let y_start = (row * c.cell_height()) as isize - c.context_margin as isize;
                for py in 0..ph {
                    for px in 0..pw {
                        let mut acc = [0.0f32; 3];
                        for dy in 0..pool {
                            let y = y_start + (py * pool + dy) as isize;
                            if y < 0 || y >= image.height as isize {
                                continue;
                            }
                            for dx in 0..pool {
                                let x = x_start + (px * pool + dx) as isize;
                                if x < 0 || x >= image.width as isize {
                                    continue;
                                }
                                let p = image.pixel(x as usize, y as usize);
                                acc[0] += p[0];
                                acc[1] += p[1];
                                acc[2] += p[2];
                            }
                        }
                        let base = 3 * (py * pw + px);
                        out[base] = acc[0] * norm;
                        out[base + 1] = acc[1] * norm;
                        out[base + 2] = acc[2] * norm;
                    }
                }
            }
        }
        Ok(CellFeatures {
            dim,
            cells: c.num_cells(),
            data,
        })
    }

    #[inline]
    pub(crate) fn normalize_into(&self, raw: &[f32], z: &mut [f64]) {
        for ((zi, &r), (m, s)) in z.iter_mut().zip(raw).zip(self.feat_mean.iter().zip(&self.feat_std)) {
            *zi = (r as f64 - m) / s;
        }
    }

    pub(crate) fn check_features(&self, f: &CellFeatures) -> Result<()> {
        if f.dim != self.config.feature_dim() || f.cells != self.config.num_cells() {
            return Err(Error::DimensionMismatch {
                expected: self.config.feature_dim() * self.config.num_cells(),
                actual: f.dim * f.cells,
            });
        }
        Ok(())
    }

    /// Runs the detector on a raster.
    pub fn forward(&self, image: &Raster) -> Result<GridOutput> {
        let f = self.extract_features(image)?;
        self.forward_features(&f)
    }

    pub fn forward_features(&self, features: &CellFeatures) -> Result<GridOutput> {
        self.check_features(features)?;
        let l = self.layout();
        let c = &self.config;
        let cells = c.num_cells();
        let mut class_scores = vec![0.0; cells * l.k];
        let mut confidences = vec![0.0; cells * l.b];
        let mut geometry = vec![[0.0; 4]; cells * l.b];
        let mut z = vec![0.0; l.d];
        let p = &self.params;
        for cell in 0..cells {
            self.normalize_into(features.cell(cell), &mut z);
            let scores = &mut class_scores[cell * l.k..(cell + 1) * l.k];
            for (k, s) in scores.iter_mut().enumerate() {
                *s = dot(&p[l.class_w() + k * l.d..l.class_w() + (k + 1) * l.d], &z) + p[l.class_b() + k];
            }
            softmax_in_place(scores);
            for j in 0..l.b {
                let o = dot(&p[l.conf_w() + j * l.d..l.conf_w() + (j + 1) * l.d], &z) + p[l.conf_b() + j];
                confidences[cell * l.b + j] = sigmoid(o);
                let mut g = [0.0; 4];
                for (m, gm) in g.iter_mut().enumerate() {
                    let row = 4 * j + m;
                    *gm = dot(&p[l.geom_w() + row * l.d..l.geom_w() + (row + 1) * l.d], &z) + p[l.geom_b() + row];
                }
                geometry[cell * l.b + j] = [g[0], g[1], sigmoid(g[2]), sigmoid(g[3])];
            }
        }
        GridOutput::new(c.cells_x, c.cells_y, l.b, l.k, class_scores, confidences, geometry)
    }
}
