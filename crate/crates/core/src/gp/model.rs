use serde::{Deserialize, Serialize};

use super::chol::Cholesky;
use super::kernel::Kernel;
use crate::{Error, Result};

/// Label of a GP training example. `Negative` examples count as -1 for
/// every one-vs-all regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GpLabel {
    Class(usize),
    Negative,
}

/// Posterior means per known class and the shared latent variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPrediction {
    pub means: Vec<f64>,
    pub variance: f64,
}

impl PosteriorPrediction {
    /// Index of the largest mean; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        if self.means.is_empty() {
            return None;
        }
        let mut best = 0;
        for (i, &m) in self.means.iter().enumerate() {
            if m > self.means[best] {
                best = i;
            }
        }
        Some(best)
    }
}

/// One-vs-all GP label regression with ±1 targets and a shared factor of
/// `K + noise * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    kernel: Kernel,
    noise: f64,
    dim: usize,
    inputs: Vec<Vec<f64>>,
    labels: Vec<GpLabel>,
    /// Known class ids, in order of first appearance.
    classes: Vec<usize>,
    factor: Cholesky,
    /// `(K + noise I)^-1 y_k` per known class.
    alphas: Vec<Vec<f64>>,
    /// Same for an all-negative target, i.e. a class not seen yet.
    alpha_unseen: Vec<f64>,
}

impl GpModel {
    pub fn empty(kernel: Kernel, noise: f64, dim: usize) -> Result<Self> {
        if !kernel.is_valid() {
            return Err(Error::InvalidArgument(format!("invalid kernel {kernel:?}")));
        }
        if !(noise >= 0.0) || !noise.is_finite() {
            return Err(Error::InvalidArgument(format!("noise variance {noise} must be >= 0")));
        }
        Ok(Self {
            kernel,
            noise,
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
            classes: Vec::new(),
            factor: Cholesky::empty(),
            alphas: Vec::new(),
            alpha_unseen: Vec::new(),
        })
    }

    /// Fits from scratch by factoring the full Gram matrix.
    pub fn fit(inputs: &[Vec<f64>], labels: &[GpLabel], kernel: Kernel, noise: f64) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Empty("GP training inputs"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), actual: labels.len() });
        }
        let dim = inputs[0].len();
        let mut model = Self::empty(kernel, noise, dim)?;
        for x in inputs {
            model.check_dim(x)?;
        }
        let n = inputs.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = kernel.eval(&inputs[i], &inputs[j]);
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
            gram[i * n + i] += noise;
        }
        model.factor = Cholesky::factor(&gram, n)?;
        model.inputs = inputs.to_vec();
        model.labels = labels.to_vec();
        for l in labels {
            if let GpLabel::Class(c) = *l {
                if !model.classes.contains(&c) {
                    model.classes.push(c);
                }
            }
        }
        model.refresh_alphas()?;
        Ok(model)
    }

    /// Returns the model trained on one more example, extending the stored
    /// factor by one row. A new class id adds a regressor for which all
    /// earlier examples are negatives.
    pub fn update(&self, x: &[f64], label: GpLabel) -> Result<Self> {
        let mut next = self.clone();
        next.update_in_place(x, label)?;
        Ok(next)
    }

    pub fn update_in_place(&mut self, x: &[f64], label: GpLabel) -> Result<()> {
        if self.inputs.is_empty() {
            self.dim = x.len();
        }
        self.check_dim(x)?;
        let col = self.kernel_vector(x);
        self.factor.extend(&col, self.kernel.eval(x, x) + self.noise)?;
        self.inputs.push(x.to_vec());
        self.labels.push(label);
        if let GpLabel::Class(c) = label {
            if !self.classes.contains(&c) {
                self.classes.push(c);
            }
        }
        self.refresh_alphas()
    }

    fn targets(&self, class: Option<usize>) -> Vec<f64> {
        self.labels
            .iter()
            .map(|l| match (l, class) {
                (GpLabel::Class(c), Some(k)) if *c == k => 1.0,
                _ => -1.0,
            })
            .collect()
    }

    fn refresh_alphas(&mut self) -> Result<()> {
        self.alphas = self
            .classes
            .iter()
            .map(|&c| self.factor.solve(&self.targets(Some(c))))
            .collect::<Result<_>>()?;
        self.alpha_unseen = self.factor.solve(&self.targets(None))?;
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, actual: x.len() });
        }
        Ok(())
    }

    fn kernel_vector(&self, x: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|xi| self.kernel.eval(xi, x)).collect()
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }
    pub fn noise(&self) -> f64 {
        self.noise
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.inputs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }
    pub fn labels(&self) -> &[GpLabel] {
        &self.labels
    }
    /// Known class ids; prediction means follow this order.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }
    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn predict(&self, x: &[f64]) -> Result<PosteriorPrediction> {
        self.check_dim(x)?;
        let k = self.kernel_vector(x);
        let v = self.factor.solve_lower(&k)?;
        let variance = (self.kernel.eval(x, x) - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        let means = self.alphas.iter().map(|a| dot(a, &k)).collect();
        Ok(PosteriorPrediction { means, variance })
    }

    /// Posterior mean of a regressor for a class not seen yet.
    pub fn unseen_mean(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(dot(&self.alpha_unseen, &self.kernel_vector(x)))
    }

    /// Posterior covariance of the latent function between `a` and `b`.
    pub fn covariance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        let va = self.factor.solve_lower(&self.kernel_vector(a))?;
        let vb = self.factor.solve_lower(&self.kernel_vector(b))?;
        Ok(self.kernel.eval(a, b) - dot(&va, &vb))
    }

    /// Predicted class id: argmax over means, ties to the lowest class id.
    pub fn predicted_class(&self, pred: &PosteriorPrediction) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (&c, &m) in self.classes.iter().zip(&pred.means) {
            let better = match best {
                None => true,
                Some((bc, bm)) => m > bm || (m == bm && c < bc),
            };
            if better {
                best = Some((c, m));
            }
        }
        best.map(|(c, _)| c)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    const RBF: Kernel = Kernel::Rbf { gamma: 0.5 };

    #[test]
    fn single_point_closed_form() {
        let m = GpModel::fit(&[vec![0.3, -0.2]], &[GpLabel::Class(4)], RBF, 0.1).unwrap();
        let p = m.predict(&[0.3, -0.2]).unwrap();
        assert_eq!(m.classes(), &[4]);
        assert!((p.means[0] - 1.0 / 1.1).abs() < 1e-14);
    }

    #[test]
    fn noiseless_interpolation() {
        let xs = vec![vec![0.0], vec![1.0], vec![2.5]];
        let labels = [GpLabel::Class(0), GpLabel::Class(1), GpLabel::Class(0)];
        let m = GpModel::fit(&xs, &labels, RBF, 0.0).unwrap();
        for (x, l) in xs.iter().zip(labels) {
            let p = m.predict(x).unwrap();
            let GpLabel::Class(c) = l else { unreachable!() };
            for (k, &mean) in m.classes().iter().zip(&p.means) {
                let t = if *k == c { 1.0 } else { -1.0 };
                assert!((mean - t).abs() < 1e-6, "{mean} vs {t}");
            }
            assert!(p.variance < 1e-6);
        }
    }

    #[test]
    fn two_class_means_are_antisymmetric() {
        let xs = vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![-1.2, 0.3], vec![1.2, 0.3]];
        let labels = [GpLabel::Class(0), GpLabel::Class(1), GpLabel::Class(0), GpLabel::Class(1)];
        let m = GpModel::fit(&xs, &labels, RBF, 0.1).unwrap();
        for x in [[0.2, 0.1], [-3.0, 1.0], [0.0, 0.0]] {
            let p = m.predict(&x).unwrap();
            assert!((p.means[0] + p.means[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn far_point_reverts_to_prior() {
        let m = GpModel::fit(&[vec![0.0, 0.0]], &[GpLabel::Class(0)], RBF, 0.1).unwrap();
        let p = m.predict(&[50.0, 50.0]).unwrap();
        assert!(p.means[0].abs() < 1e-12);
        assert!((p.variance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_from_empty_equals_fit() {
        let e = GpModel::empty(RBF, 0.1, 2).unwrap();
        let u = e.update(&[0.5, 0.5], GpLabel::Class(2)).unwrap();
        let f = GpModel::fit(&[vec![0.5, 0.5]], &[GpLabel::Class(2)], RBF, 0.1).unwrap();
        assert_eq!(u.predict(&[0.1, 0.9]).unwrap(), f.predict(&[0.1, 0.9]).unwrap());
    }

    #[test]
    fn tie_breaks_to_lowest_class_id() {
        let m = GpModel::fit(
            &[vec![0.0], vec![10.0]],
            &[GpLabel::Class(3), GpLabel::Class(1)],
            RBF,
            0.1,
        )
        .unwrap();
        let pred = PosteriorPrediction { means: vec![0.5, 0.5], variance: 0.0 };
        assert_eq!(m.predicted_class(&pred), Some(1));
        let pred = PosteriorPrediction { means: vec![0.9, 0.1], variance: 0.0 };
        assert_eq!(m.predicted_class(&pred), Some(3));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = GpModel::fit(&[vec![0.0, 1.0]], &[GpLabel::Class(0)], RBF, 0.1).unwrap();
        assert!(matches!(m.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(GpModel::fit(&[vec![0.0]], &[], RBF, 0.1).is_err());
    }
}
