//! Class discovery experiment: starting from a few labeled examples of two
//! classes, query pool points one at a time and count how many classes
//! have been found. Points of unnameable categories and isolated noise are
//! rejected by the simulated annotator.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cache::PosteriorCache;
use super::emoc::{gp_unc, label_change_sum, mc_class_probabilities};
use super::kernel::Kernel;
use super::model::GpLabel;
use crate::metrics::margin_1vs2;
use crate::synthdata::{generate_feature_clusters, FeatureClusterSpec, FeatureDataset};
use crate::{seeds, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscoveryMethod {
    Emoc,
    EmocDensity,
    /// Density weighting plus rejection handling.
    EmocReject,
    GpVar,
    GpUnc,
    OneVsTwo,
    Random,
}

impl DiscoveryMethod {
    pub const ALL: [DiscoveryMethod; 7] = [
        DiscoveryMethod::Emoc,
        DiscoveryMethod::EmocDensity,
        DiscoveryMethod::EmocReject,
        DiscoveryMethod::GpVar,
        DiscoveryMethod::GpUnc,
        DiscoveryMethod::OneVsTwo,
        DiscoveryMethod::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscoveryMethod::Emoc => "emoc",
            DiscoveryMethod::EmocDensity => "emoc-density",
            DiscoveryMethod::EmocReject => "emoc-reject",
            DiscoveryMethod::GpVar => "gp-var",
            DiscoveryMethod::GpUnc => "gp-unc",
            DiscoveryMethod::OneVsTwo => "1vs2",
            DiscoveryMethod::Random => "random",
        }
    }
}

impl fmt::Display for DiscoveryMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiscoveryMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMetric(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub data: FeatureClusterSpec,
    pub kernel: Kernel,
    pub noise: f64,
    pub initial_classes: usize,
    pub initial_per_class: usize,
    pub test_per_class: usize,
    pub budget: usize,
    pub mc_samples: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            data: FeatureClusterSpec::default(),
            kernel: Kernel::Rbf { gamma: 0.5 },
            noise: 0.1,
            initial_classes: 2,
            initial_per_class: 5,
            test_per_class: 30,
            budget: 100,
            mc_samples: 100,
        }
    }
}

/// Per-query results of one run; index 0 is the state before any query.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryRun {
    pub discovered: Vec<usize>,
    pub accuracy: Vec<f64>,
    /// Dataset indices of the queried points, in order.
    pub queried: Vec<usize>,
}

/// Runs one discovery task. `seed` fixes the test split, the initial
/// labeled set and all randomness of the selection.
pub fn run_discovery(
    dataset: &FeatureDataset,
    method: DiscoveryMethod,
    config: &DiscoveryConfig,
    seed: u64,
) -> Result<DiscoveryRun> {
    let k = dataset.num_classes();
    if k < config.initial_classes.max(2) {
        return Err(Error::InvalidArgument(format!("need at least 2 nameable classes, found {k}")));
    }
    let mut rng = seeds::rng(seed);
    let mut is_test = vec![false; dataset.points.len()];
    let mut train_by_class: Vec<Vec<usize>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut idx = dataset.indices_of_class(c);
        idx.shuffle(&mut rng);
        if idx.len() < config.test_per_class + config.initial_per_class {
            return Err(Error::InvalidArgument(format!("class {c} has only {} points", idx.len())));
        }
        for &i in &idx[..config.test_per_class] {
            is_test[i] = true;
        }
        train_by_class.push(idx[config.test_per_class..].to_vec());
    }
    let all_classes: Vec<usize> = (0..k).collect();
    let initial_classes: Vec<usize> = all_classes
        .choose_multiple(&mut rng, config.initial_classes)
        .copied()
        .collect();
    let mut initial = Vec::new();
    for &c in &initial_classes {
        initial.extend(
            train_by_class[c]
                .choose_multiple(&mut rng, config.initial_per_class)
                .copied(),
        );
    }

    let points: Vec<Vec<f64>> = dataset.points.iter().map(|p| p.x.clone()).collect();
    let mut cache = PosteriorCache::new(&points, config.kernel, config.noise)?;
    let mut labeled = vec![false; points.len()];
    for &i in &initial {
        cache.observe(i, annotate(dataset, i))?;
        labeled[i] = true;
    }
    let eval: Vec<usize> = (0..points.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..points.len()).filter(|&i| is_test[i]).collect();
    let density: Vec<f64> = if matches!(method, DiscoveryMethod::EmocDensity | DiscoveryMethod::EmocReject) {
        points
            .iter()
            .map(|x| eval.iter().map(|&j| config.kernel.eval(&points[j], x)).sum::<f64>() / eval.len() as f64)
            .collect()
    } else {
        Vec::new()
    };

    let pool_size = eval.len() - initial.len();
    let budget = if config.budget > pool_size {
        log::warn!("budget {} exceeds pool size {pool_size}; truncating", config.budget);
        pool_size
    } else {
        config.budget
    };
    let mut run = DiscoveryRun {
        discovered: vec![cache.classes().len()],
        accuracy: vec![accuracy(&cache, dataset, &test)],
        queried: Vec::with_capacity(budget),
    };
    let mut random_rng = seeds::derived_rng(seed, seeds::STREAM_RANDOM_METRIC, 0);
    for query in 0..budget {
        let mut best: Option<(usize, f64)> = None;
        for &c in &eval {
            if labeled[c] {
                continue;
            }
            let mc_seed = seeds::derive(seed, seeds::STREAM_MC, (query * points.len() + c) as u64);
            let score = match method {
                DiscoveryMethod::Random => random_rng.random::<f64>(),
                DiscoveryMethod::GpVar => cache.variance(c),
                DiscoveryMethod::GpUnc => gp_unc(&cache.prediction(c), config.noise),
                DiscoveryMethod::OneVsTwo => {
                    margin_1vs2(&mc_class_probabilities(&cache.prediction(c), config.mc_samples, mc_seed)?)?
                }
                DiscoveryMethod::Emoc | DiscoveryMethod::EmocDensity | DiscoveryMethod::EmocReject => {
                    let mut v = cached_emoc(&cache, c, &eval, config.mc_samples, mc_seed)?;
                    if method != DiscoveryMethod::Emoc {
                        v *= density[c];
                    }
                    if method == DiscoveryMethod::EmocReject {
                        v *= 1.0 - cache.reject_probability(c);
                    }
                    v
                }
            };
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((c, score));
            }
        }
        let Some((pick, _)) = best else { break };
        cache.observe(pick, annotate(dataset, pick))?;
        labeled[pick] = true;
        run.queried.push(pick);
        run.discovered.push(cache.classes().len());
        run.accuracy.push(accuracy(&cache, dataset, &test));
    }
    Ok(run)
}

/// The simulated annotator names classes and rejects everything else.
fn annotate(dataset: &FeatureDataset, i: usize) -> GpLabel {
    match dataset.points[i].label.class() {
        Some(c) => GpLabel::Class(c),
        None => GpLabel::Negative,
    }
}

fn accuracy(cache: &PosteriorCache, dataset: &FeatureDataset, test: &[usize]) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let correct = test
        .iter()
        .filter(|&&i| cache.predicted_class(i) == dataset.points[i].label.class())
        .count();
    correct as f64 / test.len() as f64
}

/// EMOC of pool point `c` from the cached posterior: the closed-form output
/// change factorizes into a label-dependent residual and a mean absolute
/// posterior covariance with the evaluation points.
fn cached_emoc(cache: &PosteriorCache, c: usize, eval: &[usize], mc_samples: usize, mc_seed: u64) -> Result<f64> {
    let pred = cache.prediction(c);
    let probs = mc_class_probabilities(&pred, mc_samples, mc_seed)?;
    let denom = pred.variance + cache.noise();
    if denom <= 0.0 {
        return Ok(0.0);
    }
    let row = cache.covariance_row(c);
    let spread = eval.iter().map(|&j| row[j].abs()).sum::<f64>() / eval.len() as f64 / denom;
    let mut expected = 0.0;
    for (&class, &p) in cache.classes().iter().zip(&probs) {
        if p > 0.0 {
            expected += p * label_change_sum(cache.classes(), &pred.means, cache.unseen_mean(c), GpLabel::Class(class));
        }
    }
    Ok(expected * spread)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryRow {
    pub method: String,
    pub task: usize,
    pub init: usize,
    pub query_index: usize,
    pub discovered_classes: usize,
    pub test_accuracy: f64,
}

/// Every method on every `(task, init)` pair. Task `t` draws its dataset
/// from `(seed, t)`; init `i` of that task its split and initial labels.
/// All methods see the same tasks and inits.
pub fn run_discovery_sweep(
    config: &DiscoveryConfig,
    methods: &[DiscoveryMethod],
    tasks: usize,
    inits: usize,
    seed: u64,
) -> Result<Vec<DiscoveryRow>> {
    let mut rows = Vec::new();
    for &method in methods {
        for task in 0..tasks {
            let task_seed = seeds::derive(seed, seeds::STREAM_DISCOVERY, task as u64);
            let dataset = generate_feature_clusters(&config.data, task_seed)?;
            for init in 0..inits {
                let run = run_discovery(&dataset, method, config, seeds::derive(task_seed, seeds::STREAM_DISCOVERY, init as u64))?;
                for (q, (&d, &a)) in run.discovered.iter().zip(&run.accuracy).enumerate() {
                    rows.push(DiscoveryRow {
                        method: method.name().to_string(),
                        task,
                        init,
                        query_index: q,
                        discovered_classes: d,
                        test_accuracy: a,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Writes `method,task,init,query_index,discovered_classes,test_accuracy`.
pub fn write_discovery_csv<W: Write>(out: W, rows: &[DiscoveryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean discovered-class count at each query index for one method.
pub fn mean_discovered(rows: &[DiscoveryRow], method: &str) -> Vec<f64> {
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.method == method) {
        if sums.len() <= r.query_index {
            sums.resize(r.query_index + 1, (0.0, 0));
        }
        sums[r.query_index].0 += r.discovered_classes as f64;
        sums[r.query_index].1 += 1;
    }
    sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
}
