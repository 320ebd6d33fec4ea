use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{Exploration, ExperimentConfig, RunRecord, TestSets, UnlabeledScene};
use crate::detector::{train_initial, DetectorModel, GridConfig, PreparedScene, TrainHyper};
use crate::metrics::MetricKind;
use crate::synthdata::{generate_dataset, split_known_new, SceneSpec};
use crate::{seeds, Result};

/// Synthetic known/new class exploration task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationTask {
    pub scenes: SceneSpec,
    pub new_classes: BTreeSet<usize>,
    /// Scenes generated before splitting into known-only and new parts.
    pub pool_scenes: usize,
    /// Cap on the unlabeled part.
    pub max_unlabeled: usize,
    /// Scenes generated for testing, split the same way.
    pub test_scenes: usize,
    pub grid: GridConfig,
    pub initial: TrainHyper,
}

impl Default for ExplorationTask {
    fn default() -> Self {
        let scenes = SceneSpec::default();
        let k = scenes.num_classes();
        Self {
            grid: GridConfig::new(scenes.image_size, k),
            new_classes: BTreeSet::from([k - 2, k - 1]),
            scenes,
            pool_scenes: 500,
            max_unlabeled: 200,
            test_scenes: 300,
            initial: TrainHyper::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedTask {
    /// Trained on the known-only part.
    pub initial_model: DetectorModel,
    pub labeled: Vec<PreparedScene>,
    pub unlabeled: Vec<UnlabeledScene>,
    pub tests: TestSets,
}

/// Generates data and trains the initial model; everything depends only
/// on `(task, seed)`.
pub fn prepare_task(task: &ExplorationTask, seed: u64) -> Result<PreparedTask> {
    let k = task.scenes.num_classes();
    let mut model = DetectorModel::zeros(task.grid.clone())?;
    let prep = |scenes: Vec<crate::synthdata::Scene>, m: &DetectorModel| -> Result<Vec<PreparedScene>> {
        scenes.iter().map(|s| m.prepare(s)).collect()
    };
    let pool = generate_dataset(&task.scenes, task.pool_scenes, seeds::derive(seed, seeds::STREAM_DATA, 0))?;
    let (part_a, mut part_b) = split_known_new(pool, &task.new_classes, k)?;
    part_b.truncate(task.max_unlabeled);
    let test = generate_dataset(&task.scenes, task.test_scenes, seeds::derive(seed, seeds::STREAM_TEST_KNOWN, 0))?;
    let (test_known, test_new) = split_known_new(test, &task.new_classes, k)?;

    let labeled = prep(part_a, &model)?;
    train_initial(&mut model, &labeled, task.initial, seeds::derive(seed, seeds::STREAM_INIT_TRAIN, 0))?;
    let unlabeled = prep(part_b, &model)?.into_iter().map(UnlabeledScene::hide).collect();
    let tests = TestSets {
        known: prep(test_known, &model)?,
        new: prep(test_new, &model)?,
        known_classes: (0..k).filter(|c| !task.new_classes.contains(c)).collect(),
        new_classes: task.new_classes.iter().copied().collect(),
    };
    Ok(PreparedTask { initial_model: model, labeled, unlabeled, tests })
}

impl PreparedTask {
    pub fn explore(&self, config: ExperimentConfig, seed: u64) -> Result<(Exploration, super::LearningCurve)> {
        let mut run = Exploration::new(
            config,
            self.initial_model.clone(),
            self.labeled.clone(),
            self.unlabeled.clone(),
            seed,
        )?;
        let curve = run.run(&self.tests)?;
        Ok((run, curve))
    }
}

/// Runs every metric on every seed. Runs sharing a seed share data, the
/// initial model, the batch partition and the update randomness. Records
/// are grouped by metric, then seed.
pub fn run_sweep(
    task: &ExplorationTask,
    config: &ExperimentConfig,
    metrics: &[MetricKind],
    seed_list: &[u64],
) -> Result<Vec<RunRecord>> {
    let mut by_metric: Vec<Vec<RunRecord>> = vec![Vec::new(); metrics.len()];
    for &seed in seed_list {
        let prepared = prepare_task(task, seed)?;
        for (slot, &metric) in by_metric.iter_mut().zip(metrics) {
            let cfg = ExperimentConfig { metric, ..config.clone() };
            let (_, curve) = prepared.explore(cfg, seed)?;
            log::info!("{} seed {seed}: {} rows", metric.name(), curve.rows.len());
            slot.push(RunRecord { method: metric.name().to_string(), seed, curve });
        }
    }
    Ok(by_metric.concat())
}
