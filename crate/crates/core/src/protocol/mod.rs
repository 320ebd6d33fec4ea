//! Batch-wise active exploration with a simulated annotator.
//!
//! The unlabeled pool is split once into fixed batches. Each step values
//! every remaining batch with the frozen current model, labels the best one,
//! fine-tunes on a λ-mixture of everything labeled so far and the new batch,
//! and moves the batch into the labeled set.

mod curve;
mod experiment;

use serde::{Deserialize, Serialize};

use crate::detector::{evaluate_map, incremental_update, CellFeatures, DetectorModel, PreparedScene};
use crate::metrics::{value_batch, value_image, MetricKind};
use crate::synthdata::GroundTruthBox;
use crate::{seeds, Error, Result};

pub use curve::{auc, read_curves_csv, summarize, write_curves_csv, write_summary_csv, CurveField, CurveRow, LearningCurve, RunRecord};
pub use experiment::{prepare_task, run_sweep, ExplorationTask, PreparedTask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub metric: MetricKind,
    pub batch_size: usize,
    pub lambda: f64,
    pub update_iterations: usize,
    /// Evaluate whenever the number of newly labeled scenes crosses a
    /// multiple of this.
    pub eval_every: usize,
    pub iou_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::Sum,
            batch_size: 10,
            lambda: 0.5,
            update_iterations: 100,
            eval_every: 50,
            iou_threshold: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("batch_size and eval_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// A scene whose annotations are hidden until the oracle is asked.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledScene {
    pub features: CellFeatures,
    ground_truth: Option<Vec<GroundTruthBox>>,
}

impl UnlabeledScene {
    pub fn new(features: CellFeatures, ground_truth: Option<Vec<GroundTruthBox>>) -> Self {
        Self { features, ground_truth }
    }

    pub fn hide(scene: PreparedScene) -> Self {
        Self::new(scene.features, Some(scene.boxes))
    }
}

/// Stands in for a human annotator by returning the hidden ground truth.
pub fn simulated_oracle(scene: &UnlabeledScene) -> Result<Vec<GroundTruthBox>> {
    scene
        .ground_truth
        .clone()
        .ok_or(Error::Empty("ground truth for oracle"))
}

/// Seeded permutation of `0..n` chunked into batches; the last batch may
/// be smaller.
pub fn partition_unlabeled(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Test scenes and the class groups scored on each.
#[derive(Debug, Clone)]
pub struct TestSets {
    pub known: Vec<PreparedScene>,
    pub new: Vec<PreparedScene>,
    pub known_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
}

impl TestSets {
    pub fn evaluate(&self, model: &DetectorModel, iou: f64, step: usize, labeled_count: usize) -> Result<CurveRow> {
        let on_new = evaluate_map(model, &self.new, iou)?;
        let on_known = evaluate_map(model, &self.known, iou)?;
        let mut per_class_ap = std::collections::BTreeMap::new();
        for &c in &self.new_classes {
            per_class_ap.insert(c, on_new.per_class_ap.get(&c).copied().unwrap_or(0.0));
        }
        for &c in &self.known_classes {
            per_class_ap.insert(c, on_known.per_class_ap.get(&c).copied().unwrap_or(0.0));
        }
        Ok(CurveRow {
            step,
            labeled_count,
            map_new: on_new.map_over(self.new_classes.iter().copied()),
            map_known: on_known.map_over(self.known_classes.iter().copied()),
            per_class_ap,
        })
    }
}

/// Live state of one exploration run.
#[derive(Debug, Clone)]
pub struct Exploration {
    config: ExperimentConfig,
    model: DetectorModel,
    labeled: Vec<PreparedScene>,
    unlabeled: Vec<UnlabeledScene>,
    /// Remaining batches as `(batch id, member indices)`, in id order.
    batches: Vec<(usize, Vec<usize>)>,
    next_batch_id: usize,
    seed: u64,
    step: usize,
    labeled_count: usize,
    selections: Vec<usize>,
}

impl Exploration {
    pub fn new(
        config: ExperimentConfig,
        model: DetectorModel,
        labeled: Vec<PreparedScene>,
        unlabeled: Vec<UnlabeledScene>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let parts = partition_unlabeled(
            unlabeled.len(),
            config.batch_size,
            seeds::derive(seed, seeds::STREAM_PARTITION, 0),
        )?;
        let batches: Vec<_> = parts.into_iter().enumerate().collect();
        Ok(Self {
            next_batch_id: batches.len(),
            config,
            model,
            labeled,
            unlabeled,
            batches,
            seed,
            step: 0,
            labeled_count: 0,
            selections: Vec::new(),
        })
    }

    pub fn model(&self) -> &DetectorModel {
        &self.model
    }
    pub fn labeled(&self) -> &[PreparedScene] {
        &self.labeled
    }
    pub fn remaining_batches(&self) -> usize {
        self.batches.len()
    }
    /// Ids of the selected batches, in selection order.
    pub fn selections(&self) -> &[usize] {
        &self.selections
    }
    pub fn labeled_count(&self) -> usize {
        self.labeled_count
    }

    /// Adds a fresh unlabeled batch to the pool; returns its id.
    pub fn add_unlabeled_batch(&mut self, scenes: Vec<UnlabeledScene>) -> usize {
        let start = self.unlabeled.len();
        self.unlabeled.extend(scenes);
        let id = self.next_batch_id;
        self.next_batch_id += 1;
        self.batches.push((id, (start..self.unlabeled.len()).collect()));
        id
    }

    /// Values of the remaining batches under the current model. Reads only
    /// image features, never annotations.
    pub fn value_batches(&self) -> Result<Vec<f64>> {
        let step_seed = seeds::derive(self.seed, seeds::STREAM_RANDOM_METRIC, self.step as u64);
        self.batches
            .iter()
            .map(|(_, members)| {
                let values = members
                    .iter()
                    .map(|&i| value_image(self.config.metric, &self.model, &self.unlabeled[i].features, step_seed, i as u64))
                    .collect::<Result<Vec<_>>>()?;
                Ok(value_batch(&values))
            })
            .collect()
    }

    /// Labels the best batch and updates the model. Returns the selected
    /// batch id, or `None` once the pool is exhausted.
    pub fn step(&mut self) -> Result<Option<usize>> {
        if self.batches.is_empty() {
            return Ok(None);
        }
        let values = self.value_batches()?;
        let mut best = 0;
        for (i, v) in values.iter().enumerate() {
            if *v > values[best] {
                best = i;
            }
        }
        let (id, members) = self.batches.remove(best);
        let mut new_batch = Vec::with_capacity(members.len());
        for &i in &members {
            new_batch.push(PreparedScene {
                features: self.unlabeled[i].features.clone(),
                boxes: simulated_oracle(&self.unlabeled[i])?,
                negative_cells: Vec::new(),
            });
        }
        incremental_update(
            &mut self.model,
            &self.labeled,
            &new_batch,
            self.config.lambda,
            self.config.update_iterations,
            seeds::derive(self.seed, seeds::STREAM_UPDATE, self.step as u64),
        )?;
        self.labeled.extend(new_batch);
        self.labeled_count += members.len();
        self.step += 1;
        self.selections.push(id);
        Ok(Some(id))
    }

    /// Runs until the pool is exhausted, evaluating at the start, whenever
    /// the labeled count crosses a multiple of `eval_every`, and at the end.
    pub fn run(&mut self, tests: &TestSets) -> Result<LearningCurve> {
        let iou = self.config.iou_threshold;
        let mut rows = vec![tests.evaluate(&self.model, iou, self.step, self.labeled_count)?];
        loop {
            let before = self.labeled_count;
            if self.step()?.is_none() {
                break;
            }
            let every = self.config.eval_every;
            let crossed = self.labeled_count / every > before / every;
            if crossed || self.batches.is_empty() {
                rows.push(tests.evaluate(&self.model, iou, self.step, self.labeled_count)?);
            }
        }
        Ok(LearningCurve { rows })
    }
}
