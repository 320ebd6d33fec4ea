use super::emoc::probit;
use super::kernel::Kernel;
use super::model::{GpLabel, PosteriorPrediction};
use crate::{Error, Result};

/// GP posterior over a fixed finite set of points, updated by conditioning
/// on one noisy observation at a time.
///
/// Holds the full posterior covariance between all points and the posterior
/// mean of every one-vs-all regressor at every point, so each observation
/// costs O(N^2) and queries are lookups. Also tracks the mean of a regressor
/// for a class not seen yet and of the rejection regressor, which share the
/// same inputs.
#[derive(Debug, Clone)]
pub struct PosteriorCache {
    noise: f64,
    n: usize,
    cov: Vec<f64>,
    classes: Vec<usize>,
    class_means: Vec<Vec<f64>>,
    unseen_mean: Vec<f64>,
    reject_mean: Vec<f64>,
    any_rejected: bool,
    observed: Vec<usize>,
}

impl PosteriorCache {
    pub fn new(points: &[Vec<f64>], kernel: Kernel, noise: f64) -> Result<Self> {
        if !kernel.is_valid() || !(noise >= 0.0) {
            return Err(Error::InvalidArgument("invalid kernel or noise".into()));
        }
        let n = points.len();
        let mut cov = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = kernel.eval(&points[i], &points[j]);
                cov[i * n + j] = v;
                cov[j * n + i] = v;
            }
        }
        Ok(Self {
            noise,
            n,
            cov,
            classes: Vec::new(),
            class_means: Vec::new(),
            unseen_mean: vec![0.0; n],
            reject_mean: vec![0.0; n],
            any_rejected: false,
            observed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
    /// Point indices observed so far, in order.
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }
    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        self.cov[i * self.n + j]
    }

    pub fn covariance_row(&self, i: usize) -> &[f64] {
        &self.cov[i * self.n..(i + 1) * self.n]
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.cov[i * self.n + i].max(0.0)
    }

    pub fn prediction(&self, i: usize) -> PosteriorPrediction {
        PosteriorPrediction {
            means: self.class_means.iter().map(|m| m[i]).collect(),
            variance: self.variance(i),
        }
    }

    pub fn unseen_mean(&self, i: usize) -> f64 {
        self.unseen_mean[i]
    }

    /// Probit rejection probability, 0 until a rejection was observed.
    pub fn reject_probability(&self, i: usize) -> f64 {
        if !self.any_rejected {
            return 0.0;
        }
        probit(self.reject_mean[i], self.noise + self.variance(i))
    }

    /// Predicted class at point `i`; ties go to the lowest class id.
    pub fn predicted_class(&self, i: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, m) in self.classes.iter().zip(&self.class_means) {
            let v = m[i];
            if best.is_none_or(|(bc, bv)| v > bv || (v == bv && c < bc)) {
                best = Some((c, v));
            }
        }
        best.map(|(c, _)| c)
    }

    /// Conditions on observing `label` at point `i`. `Negative` marks a
    /// rejected example: -1 for every class, +1 for the rejection regressor.
    pub fn observe(&mut self, i: usize, label: GpLabel) -> Result<()> {
        if i >= self.n {
            return Err(Error::InvalidArgument(format!("point {i} out of range")));
        }
        let denom = self.cov[i * self.n + i] + self.noise;
        if !(denom > 0.0) {
            return Err(Error::Numerical(format!("non-positive innovation variance {denom}")));
        }
        let col: Vec<f64> = self.covariance_row(i).to_vec();
        let shift = |m: &mut [f64], target: f64| {
            let r = (target - m[i]) / denom;
            for (v, c) in m.iter_mut().zip(&col) {
                *v += r * c;
            }
        };
        if let GpLabel::Class(c) = label {
            if !self.classes.contains(&c) {
                self.classes.push(c);
                // Until now this class received only negatives.
                self.class_means.push(self.unseen_mean.clone());
            }
        }
        for (&c, m) in self.classes.iter().zip(self.class_means.iter_mut()) {
            shift(m, if label == GpLabel::Class(c) { 1.0 } else { -1.0 });
        }
        shift(&mut self.unseen_mean, -1.0);
        let rejected = label == GpLabel::Negative;
        shift(&mut self.reject_mean, if rejected { 1.0 } else { -1.0 });
        self.any_rejected |= rejected;
        let n = self.n;
        for a in 0..n {
            let ca = col[a] / denom;
            if ca == 0.0 {
                continue;
            }
            let row = &mut self.cov[a * n..(a + 1) * n];
            for (v, cb) in row.iter_mut().zip(&col) {
                *v -= ca * cb;
            }
        }
        self.observed.push(i);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{GpModel, RejectionModel};
    use rand::Rng;

    #[test]
    fn matches_direct_model_after_updates() {
        let mut rng = crate::seeds::rng(5);
        let pts: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let kernel = Kernel::Rbf { gamma: 0.4 };
        let mut cache = PosteriorCache::new(&pts, kernel, 0.1).unwrap();
        let mut model = GpModel::empty(kernel, 0.1, 3).unwrap();
        let mut rej = RejectionModel::new(kernel, 0.1, 3).unwrap();
        let labels = [
            GpLabel::Class(2),
            GpLabel::Class(0),
            GpLabel::Negative,
            GpLabel::Class(2),
            GpLabel::Class(5),
            GpLabel::Negative,
        ];
        for (step, label) in labels.into_iter().enumerate() {
            let i = step * 3;
            cache.observe(i, label).unwrap();
            model = model.update(&pts[i], label).unwrap();
            rej = rej.observe(&pts[i], label == GpLabel::Negative).unwrap();
            assert_eq!(cache.classes(), model.classes());
            for (j, x) in pts.iter().enumerate() {
                let direct = model.predict(x).unwrap();
                let cached = cache.prediction(j);
                assert!((direct.variance - cached.variance).abs() < 1e-10);
                for (a, b) in direct.means.iter().zip(&cached.means) {
                    assert!((a - b).abs() < 1e-10);
                }
                assert!((model.unseen_mean(x).unwrap() - cache.unseen_mean(j)).abs() < 1e-10);
                assert!((rej.probability(x).unwrap() - cache.reject_probability(j)).abs() < 1e-9);
                assert!((model.covariance(x, &pts[0]).unwrap() - cache.covariance(j, 0)).abs() < 1e-10);
            }
        }
    }
}
