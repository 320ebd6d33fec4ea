//! Binary model files: a fixed header, the grid configuration, the
//! training hyperparameters, then all parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::config::{GridConfig, TrainHyper};
use super::model::DetectorModel;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"ALKITGRD";
const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(&self.path, "truncated model file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl DetectorModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(128 + 8 * (self.params.len() + 2 * self.feat_mean.len()));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in [
            c.image_width,
            c.image_height,
            c.cells_x,
            c.cells_y,
            c.boxes_per_cell,
            c.num_classes,
            c.context_margin,
            c.pool,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let h = &self.hyper;
        for v in [c.confidence_threshold, c.nms_iou, h.lr] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(h.iterations as u64).to_le_bytes());
        out.extend_from_slice(&(h.minibatch as u64).to_le_bytes());
        out.extend_from_slice(&h.weight_decay.to_le_bytes());
        for v in self.params.iter().chain(&self.feat_mean).chain(&self.feat_std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a model file; `origin` is used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path: origin.to_string() };
        if r.take(8)? != MODEL_MAGIC {
            return Err(Error::format(origin, "bad magic, not a detector model"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { expected: VERSION, found: version });
        }
        r.u32()?;
        let mut ints = [0usize; 8];
        for v in ints.iter_mut() {
            *v = r.u32()? as usize;
        }
        let [image_width, image_height, cells_x, cells_y, boxes_per_cell, num_classes, context_margin, pool] = ints;
        let config = GridConfig {
            image_width,
            image_height,
            cells_x,
            cells_y,
            boxes_per_cell,
            num_classes,
            context_margin,
            pool,
            confidence_threshold: r.f64()?,
            nms_iou: r.f64()?,
        };
        let lr = r.f64()?;
        let hyper = TrainHyper {
            lr,
            iterations: r.u64()? as usize,
            minibatch: r.u64()? as usize,
            weight_decay: r.f64()?,
        };
        config.validate().map_err(|e| Error::format(origin, &e.to_string()))?;
        let mut model = DetectorModel::zeros(config)?;
        model.hyper = hyper;
        let (np, nd) = (model.params.len(), model.feat_mean.len());
        model.params = r.f64s(np)?;
        model.feat_mean = r.f64s(nd)?;
        model.feat_std = r.f64s(nd)?;
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
