use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seeds;
use crate::{Error, Result};

/// Kind of label a feature point carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PointLabel {
    /// A nameable class the annotator can label.
    Class(usize),
    /// A coherent cluster the annotator will reject (unknown category).
    Categorical(usize),
    /// Isolated low-density point the annotator will reject.
    Noise,
}

impl PointLabel {
    pub fn is_rejection(&self) -> bool {
        !matches!(self, PointLabel::Class(_))
    }

    pub fn class(&self) -> Option<usize> {
        match self {
            PointLabel::Class(c) => Some(*c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub x: Vec<f64>,
    pub label: PointLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDataset {
    pub dim: usize,
    pub points: Vec<FeaturePoint>,
}

impl FeatureDataset {
    pub fn num_classes(&self) -> usize {
        self.points
            .iter()
            .filter_map(|p| p.label.class())
            .max()
            .map_or(0, |m| m + 1)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| p.label == PointLabel::Class(class))
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes `kind,label,x0,..` rows; kind is one of `class`, `reject`, `noise`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["kind".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for p in &self.points {
            let (kind, label) = match p.label {
                PointLabel::Class(c) => ("class", c as i64),
                PointLabel::Categorical(c) => ("reject", c as i64),
                PointLabel::Noise => ("noise", -1),
            };
            let mut row = vec![kind.to_string(), label.to_string()];
            row.extend(p.x.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers()?.len().saturating_sub(2);
        let mut points = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let bad = |msg: &str| Error::format("<feature table>", format!("row {}: {msg}", line + 1));
            if record.len() != dim + 2 {
                return Err(bad("wrong column count"));
            }
            let label_id: i64 = record[1].parse().map_err(|_| bad("label is not an integer"))?;
            let label = match &record[0] {
                "class" if label_id >= 0 => PointLabel::Class(label_id as usize),
                "reject" if label_id >= 0 => PointLabel::Categorical(label_id as usize),
                "noise" => PointLabel::Noise,
                _ => return Err(bad("unknown label kind")),
            };
            let x = (2..record.len())
                .map(|i| record[i].parse::<f64>().map_err(|_| bad("non-numeric feature")))
                .collect::<Result<Vec<_>>>()?;
            points.push(FeaturePoint { x, label });
        }
        Ok(Self { dim, points })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureClusterSpec {
    pub k_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub cluster_sigma: f64,
    pub rejection_clusters: usize,
    pub noise_points: usize,
    /// Minimum distance between any two cluster means.
    pub min_separation: f64,
}

impl Default for FeatureClusterSpec {
    fn default() -> Self {
        Self {
            k_classes: 10,
            per_class: 60,
            dim: 8,
            cluster_sigma: 0.35,
            rejection_clusters: 3,
            noise_points: 120,
            min_separation: 2.0,
        }
    }
}

/// Gaussian blobs for nameable classes and categorical rejections, plus
/// uniform noise over the bounding hypercube of the blobs.
pub fn generate_feature_clusters(spec: &FeatureClusterSpec, seed: u64) -> Result<FeatureDataset> {
    if spec.dim < 2 {
        return Err(Error::InvalidArgument("feature dimension must be at least 2".into()));
    }
    if !(spec.cluster_sigma >= 0.0) {
        return Err(Error::InvalidArgument("cluster_sigma must be non-negative".into()));
    }
    let mut rng = seeds::rng(seed);
    let n_clusters = spec.k_classes + spec.rejection_clusters;
    // Means spread over a cube sized so the separation constraint is feasible.
    let side = spec.min_separation * (n_clusters.max(1) as f64).powf(1.0 / spec.dim as f64) * 1.5;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
    let mut attempts = 0usize;
    while means.len() < n_clusters {
        let m: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(0.0..side)).collect();
        attempts += 1;
        let far = means.iter().all(|o| dist2(o, &m).sqrt() >= spec.min_separation);
        if far || attempts > 10_000 {
            means.push(m);
        }
    }
    let normal = Normal::new(0.0, spec.cluster_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut points = Vec::with_capacity(n_clusters * spec.per_class + spec.noise_points);
    for (ci, mean) in means.iter().enumerate() {
        let label = if ci < spec.k_classes {
            PointLabel::Class(ci)
        } else {
            PointLabel::Categorical(ci - spec.k_classes)
        };
        for _ in 0..spec.per_class {
            let x = mean.iter().map(|&m| m + normal.sample(&mut rng)).collect();
            points.push(FeaturePoint { x, label });
        }
    }
    if spec.noise_points > 0 {
        let (lo, hi) = bounding_box(&points, spec.dim, side);
        for _ in 0..spec.noise_points {
            let x = (0..spec.dim)
                .map(|d| if hi[d] > lo[d] { rng.random_range(lo[d]..hi[d]) } else { lo[d] })
                .collect();
            points.push(FeaturePoint { x, label: PointLabel::Noise });
        }
    }
    Ok(FeatureDataset { dim: spec.dim, points })
}

fn bounding_box(points: &[FeaturePoint], dim: usize, fallback: f64) -> (Vec<f64>, Vec<f64>) {
    if points.is_empty() {
        return (vec![0.0; dim], vec![fallback; dim]);
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in points {
        for d in 0..dim {
            lo[d] = lo[d].min(p.x[d]);
            hi[d] = hi[d].max(p.x[d]);
        }
    }
    (lo, hi)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_nameable_classes() {
        let spec = FeatureClusterSpec::default();
        let ds = generate_feature_clusters(&spec, 1).unwrap();
        assert_eq!(ds.num_classes(), 10);
        assert!(ds.points.iter().all(|p| p.x.len() == spec.dim));
        let rejects = ds.points.iter().filter(|p| p.label.is_rejection()).count();
        assert_eq!(rejects, spec.rejection_clusters * spec.per_class + spec.noise_points);
    }

    #[test]
    fn purely_nameable_dataset() {
        let spec = FeatureClusterSpec {
            rejection_clusters: 0,
            noise_points: 0,
            ..FeatureClusterSpec::default()
        };
        let ds = generate_feature_clusters(&spec, 5).unwrap();
        assert!(ds.points.iter().all(|p| matches!(p.label, PointLabel::Class(_))));
    }

    #[test]
    fn zero_sigma_collapses_clusters() {
        let spec = FeatureClusterSpec {
            k_classes: 2,
            per_class: 5,
            cluster_sigma: 0.0,
            rejection_clusters: 0,
            noise_points: 0,
            ..FeatureClusterSpec::default()
        };
        let ds = generate_feature_clusters(&spec, 3).unwrap();
        for c in 0..2 {
            let idx = ds.indices_of_class(c);
            for &i in &idx {
                for &j in &idx {
                    assert!(dist2(&ds.points[i].x, &ds.points[j].x) < 1e-24);
                }
            }
        }
    }

    #[test]
    fn deterministic_and_csv_round_trip() {
        let spec = FeatureClusterSpec {
            per_class: 4,
            noise_points: 5,
            ..FeatureClusterSpec::default()
        };
        let a = generate_feature_clusters(&spec, 9).unwrap();
        assert_eq!(a, generate_feature_clusters(&spec, 9).unwrap());
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = FeatureDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_one_dimensional_features() {
        let spec = FeatureClusterSpec {
            dim: 1,
            ..FeatureClusterSpec::default()
        };
        assert!(generate_feature_clusters(&spec, 0).is_err());
    }
}
