use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use super::kernel::Kernel;
use super::model::{GpLabel, GpModel, PosteriorPrediction};
use crate::metrics::margin_1vs2;
use crate::{seeds, Error, Result};

/// Class probabilities estimated by drawing `z` joint samples, one
/// independent `N(mu_k, sigma^2)` per class, and counting how often each
/// class attains the maximum (ties to the lowest index).
pub fn mc_class_probabilities(pred: &PosteriorPrediction, z: usize, seed: u64) -> Result<Vec<f64>> {
    if z == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let k = pred.means.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let sd = pred.variance.max(0.0).sqrt();
    let mut counts = vec![0usize; k];
    let mut rng = seeds::rng(seed);
    for _ in 0..z {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &m) in pred.means.iter().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            let v = m + sd * e;
            if v > best_v {
                best = i;
                best_v = v;
            }
        }
        counts[best] += 1;
    }
    Ok(counts.into_iter().map(|c| c as f64 / z as f64).collect())
}

/// `Σ_k |y'_k - mu_k(x)|` for the one-vs-all targets `y'` implied by
/// `label`. `means` follows `classes`; a label with a class id outside
/// `classes` adds one output whose current mean is `unseen_mean`.
pub fn label_change_sum(classes: &[usize], means: &[f64], unseen_mean: f64, label: GpLabel) -> f64 {
    let mut total = 0.0;
    for (&c, &m) in classes.iter().zip(means) {
        let target = if label == GpLabel::Class(c) { 1.0 } else { -1.0 };
        total += (target - m).abs();
    }
    if let GpLabel::Class(c) = label {
        if !classes.contains(&c) {
            total += (1.0 - unseen_mean).abs();
        }
    }
    total
}

/// Total L1 change of all regressor outputs over `eval_points` caused by
/// adding `(x_cand, label)`, in closed form:
/// `Δf_k(x) = (y'_k - mu_k(x_c)) c(x, x_c) / (sigma^2(x_c) + noise)`.
pub fn delta_model_output(model: &GpModel, x_cand: &[f64], label: GpLabel, eval_points: &[Vec<f64>]) -> Result<f64> {
    let pred = model.predict(x_cand)?;
    let denom = pred.variance + model.noise();
    if denom <= 0.0 {
        // Noise-free duplicate of a training point: nothing can change.
        return Ok(0.0);
    }
    let residual = label_change_sum(model.classes(), &pred.means, model.unseen_mean(x_cand)?, label);
    let mut spread = 0.0;
    for x in eval_points {
        spread += model.covariance(x, x_cand)?.abs();
    }
    Ok(residual * spread / denom)
}

/// Expected mean L1 output change over `eval_points`, with label
/// probabilities `probs` over the model's known classes.
pub fn emoc(model: &GpModel, x_cand: &[f64], eval_points: &[Vec<f64>], probs: &[f64]) -> Result<f64> {
    if eval_points.is_empty() {
        return Err(Error::Empty("evaluation points"));
    }
    if probs.len() != model.classes().len() {
        return Err(Error::DimensionMismatch { expected: model.classes().len(), actual: probs.len() });
    }
    let mut total = 0.0;
    for (&c, &p) in model.classes().iter().zip(probs) {
        if p > 0.0 {
            total += p * delta_model_output(model, x_cand, GpLabel::Class(c), eval_points)?;
        }
    }
    Ok(total / eval_points.len() as f64)
}

/// `(1/|D|) Σ_j k(x_j, x)`.
pub fn parzen_density(x: &[f64], points: &[Vec<f64>], kernel: Kernel) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("density support"));
    }
    Ok(points.iter().map(|p| kernel.eval(p, x)).sum::<f64>() / points.len() as f64)
}

/// EMOC weighted by the Parzen density of the candidate.
pub fn emoc_density(
    model: &GpModel,
    x_cand: &[f64],
    eval_points: &[Vec<f64>],
    probs: &[f64],
    all_points: &[Vec<f64>],
) -> Result<f64> {
    Ok(emoc(model, x_cand, eval_points, probs)? * parzen_density(x_cand, all_points, model.kernel())?)
}

/// A rejected query changes nothing, so the expected change shrinks by the
/// probability of rejection.
pub fn emoc_with_rejection(value: f64, p_reject: f64) -> f64 {
    (1.0 - p_reject) * value
}

/// Binary GP separating rejected examples (+1) from examples that
/// received a class (-1).
#[derive(Debug, Clone, PartialEq)]
pub struct RejectionModel {
    gp: GpModel,
    active: bool,
}

impl RejectionModel {
    pub fn new(kernel: Kernel, noise: f64, dim: usize) -> Result<Self> {
        Ok(Self { gp: GpModel::empty(kernel, noise, dim)?, active: false })
    }

    /// Active once a rejected example has been observed.
    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn observe(&self, x: &[f64], rejected: bool) -> Result<Self> {
        let label = if rejected { GpLabel::Class(0) } else { GpLabel::Negative };
        Ok(Self { gp: self.gp.update(x, label)?, active: self.active || rejected })
    }

    /// `Phi(mu_r / sqrt(noise + sigma_r^2))`, or 0 while inactive.
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        if !self.active {
            return Ok(0.0);
        }
        let pred = self.gp.predict(x)?;
        Ok(probit(pred.means[0], self.gp.noise() + pred.variance))
    }
}

pub(crate) fn probit(mean: f64, scale2: f64) -> f64 {
    let phi = Normal::standard();
    if scale2 <= 0.0 {
        return if mean > 0.0 { 1.0 } else if mean < 0.0 { 0.0 } else { 0.5 };
    }
    phi.cdf(mean / scale2.sqrt())
}

/// Scoring options for [`EmocConfig::score`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmocConfig {
    pub mc_samples: usize,
    pub density: bool,
    pub rejection: bool,
    pub seed: u64,
}

impl Default for EmocConfig {
    fn default() -> Self {
        Self { mc_samples: 100, density: false, rejection: false, seed: 0 }
    }
}

impl EmocConfig {
    /// Full EMOC score of one candidate; `key` selects the MC draws.
    pub fn score(
        &self,
        model: &GpModel,
        rejection: &RejectionModel,
        x_cand: &[f64],
        eval_points: &[Vec<f64>],
        key: u64,
    ) -> Result<f64> {
        let pred = model.predict(x_cand)?;
        let probs = mc_class_probabilities(&pred, self.mc_samples, seeds::derive(self.seed, seeds::STREAM_MC, key))?;
        let mut v = emoc(model, x_cand, eval_points, &probs)?;
        if self.density {
            v *= parzen_density(x_cand, eval_points, model.kernel())?;
        }
        if self.rejection {
            v = emoc_with_rejection(v, rejection.probability(x_cand)?);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Random,
    GpVar,
    GpUnc,
    OneVsTwo,
}

/// Value of a candidate under a baseline criterion; larger is preferred.
pub fn baseline_value(kind: Baseline, model: &GpModel, x: &[f64], mc_samples: usize, seed: u64) -> Result<f64> {
    if kind == Baseline::Random {
        return Ok(seeds::rng(seed).random::<f64>());
    }
    let pred = model.predict(x)?;
    Ok(match kind {
        Baseline::GpVar => pred.variance,
        Baseline::GpUnc => gp_unc(&pred, model.noise()),
        Baseline::OneVsTwo => margin_1vs2(&mc_class_probabilities(&pred, mc_samples, seed)?)?,
        Baseline::Random => unreachable!(),
    })
}

pub(crate) fn gp_unc(pred: &PosteriorPrediction, noise: f64) -> f64 {
    let top = pred.means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top = if top.is_finite() { top } else { 0.0 };
    -top.abs() / (noise + pred.variance).sqrt().max(f64::MIN_POSITIVE)
}
