use rand::Rng;

use super::config::TrainHyper;
use super::model::{dot, sigmoid, softmax_in_place, CellFeatures, DetectorModel, Layout};
use crate::geometry::BBox;
use crate::synthdata::{GroundTruthBox, Scene};
use crate::{seeds, Error, Result};

const OBJECT_WEIGHT: f64 = 1.0;
const NO_OBJECT_WEIGHT: f64 = 0.1;
/// No-object weight for cells whose proposal an annotator rejected.
const REJECTED_WEIGHT: f64 = 1.0;
const GEOMETRY_WEIGHT: f64 = 1.0;
/// Expected squared norm of a normalized feature vector. Plain SGD at the
/// default rate stays stable for feature sizes in the hundreds.
const FEATURE_NORM_SQ: f64 = 16.0;
/// Minibatch gradients are rescaled to at most this norm. Cells covered by
/// a bright object can have features far from the mean, and one such
/// minibatch is otherwise enough to blow up the linear geometry heads.
const MAX_GRAD_NORM: f64 = 10.0;

/// A scene with its features extracted once, ready for repeated training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScene {
    pub features: CellFeatures,
    pub boxes: Vec<GroundTruthBox>,
    /// Cells that must be pushed strongly towards "no object".
    pub negative_cells: Vec<usize>,
}

impl DetectorModel {
    pub fn prepare(&self, scene: &Scene) -> Result<PreparedScene> {
        Ok(PreparedScene {
            features: self.extract_features(&scene.image)?,
            boxes: scene.boxes.clone(),
            negative_cells: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotTarget {
    NoObject {
        weight: f64,
    },
    Object {
        class_id: usize,
        /// `(dx, dy, w, h)` in the same encoding as the geometry head.
        geometry: [f64; 4],
        /// IoU of the current prediction with the ground truth, held fixed.
        confidence: f64,
    },
}

/// Per-(cell, box) training targets for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    pub boxes_per_cell: usize,
    pub slots: Vec<SlotTarget>,
}

fn slot_box(model: &DetectorModel, z: &[f64], cell: usize, slot: usize) -> BBox {
    let l = model.layout();
    let c = &model.config;
    let p = &model.params;
    let mut g = [0.0; 4];
    for (m, gm) in g.iter_mut().enumerate() {
        let row = 4 * slot + m;
        *gm = dot(&p[l.geom_w() + row * l.d..l.geom_w() + (row + 1) * l.d], z) + p[l.geom_b() + row];
    }
    let (col, r) = (cell % c.cells_x, cell / c.cells_x);
    BBox::new(
        (col as f64 + 0.5 + g[0]) / c.cells_x as f64,
        (r as f64 + 0.5 + g[1]) / c.cells_y as f64,
        sigmoid(g[2]),
        sigmoid(g[3]),
    )
}

/// Assigns every ground-truth box to the cell holding its center and, among
/// that cell's free boxes, to the one whose current prediction overlaps it
/// most. The confidence target is that IoU.
pub fn assign_targets(model: &DetectorModel, scene: &PreparedScene) -> SceneTargets {
    let c = &model.config;
    let b = c.boxes_per_cell;
    let mut slots = vec![SlotTarget::NoObject { weight: NO_OBJECT_WEIGHT }; c.num_cells() * b];
    for &cell in &scene.negative_cells {
        if cell < c.num_cells() {
            for j in 0..b {
                slots[cell * b + j] = SlotTarget::NoObject { weight: REJECTED_WEIGHT };
            }
        }
    }
    let mut z = vec![0.0; c.feature_dim()];
    for gt in &scene.boxes {
        let cell = c.cell_of(gt.cx, gt.cy);
        model.normalize_into(scene.features.cell(cell), &mut z);
        let gt_box = gt.bbox();
        let mut best: Option<(usize, f64)> = None;
        for j in 0..b {
            if matches!(slots[cell * b + j], SlotTarget::Object { .. }) {
                continue;
            }
            let iou = slot_box(model, &z, cell, j).iou(&gt_box);
            if best.is_none_or(|(_, v)| iou > v) {
                best = Some((j, iou));
            }
        }
        let Some((j, iou)) = best else { continue };
        let (col, row) = (cell % c.cells_x, cell / c.cells_x);
        slots[cell * b + j] = SlotTarget::Object {
            class_id: gt.class_id,
            geometry: [
                gt.cx * c.cells_x as f64 - col as f64 - 0.5,
                gt.cy * c.cells_y as f64 - row as f64 - 0.5,
                gt.w,
                gt.h,
            ],
            confidence: iou,
        };
    }
    SceneTargets { boxes_per_cell: b, slots }
}

/// Unregularized composite loss of one scene under fixed targets. When
/// `grad` is given, the parameter gradient is accumulated into it.
pub fn loss_and_grad(
    model: &DetectorModel,
    scene: &PreparedScene,
    targets: &SceneTargets,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let l: Layout = model.layout();
    let p = &model.params;
    let mut z = vec![0.0; l.d];
    let mut logits = vec![0.0; l.k];
    let mut loss = 0.0;
    for cell in 0..model.config.num_cells() {
        model.normalize_into(scene.features.cell(cell), &mut z);
        for j in 0..l.b {
            let slot = &targets.slots[cell * l.b + j];
            let cw = l.conf_w() + j * l.d;
            let c = sigmoid(dot(&p[cw..cw + l.d], &z) + p[l.conf_b() + j]);
            let dl_do = match slot {
                SlotTarget::NoObject { weight } => {
                    loss += weight * c * c;
                    weight * 2.0 * c * c * (1.0 - c)
                }
                SlotTarget::Object { confidence, .. } => {
                    let diff = c - confidence;
                    loss += OBJECT_WEIGHT * diff * diff;
                    OBJECT_WEIGHT * 2.0 * diff * c * (1.0 - c)
                }
            };
            if let Some(g) = grad.as_deref_mut() {
                axpy(dl_do, &z, &mut g[cw..cw + l.d]);
                g[l.conf_b() + j] += dl_do;
            }
            let SlotTarget::Object { class_id, geometry, .. } = slot else {
                continue;
            };
            for (m, &target) in geometry.iter().enumerate() {
                let row = 4 * j + m;
                let gw = l.geom_w() + row * l.d;
                let raw = dot(&p[gw..gw + l.d], &z) + p[l.geom_b() + row];
                let (pred, dpred) = if m < 2 {
                    (raw, 1.0)
                } else {
                    let s = sigmoid(raw);
                    (s, s * (1.0 - s))
                };
                let diff = pred - target;
                loss += GEOMETRY_WEIGHT * diff * diff;
                if let Some(g) = grad.as_deref_mut() {
                    let d = GEOMETRY_WEIGHT * 2.0 * diff * dpred;
                    axpy(d, &z, &mut g[gw..gw + l.d]);
                    g[l.geom_b() + row] += d;
                }
            }
            for (k, logit) in logits.iter_mut().enumerate() {
                let kw = l.class_w() + k * l.d;
                *logit = dot(&p[kw..kw + l.d], &z) + p[l.class_b() + k];
            }
            softmax_in_place(&mut logits);
            loss -= logits[*class_id].max(f64::MIN_POSITIVE).ln();
            if let Some(g) = grad.as_deref_mut() {
                for (k, &pk) in logits.iter().enumerate() {
                    let d = pk - if k == *class_id { 1.0 } else { 0.0 };
                    let kw = l.class_w() + k * l.d;
                    axpy(d, &z, &mut g[kw..kw + l.d]);
                    g[l.class_b() + k] += d;
                }
            }
        }
    }
    loss
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Mean scene loss over the minibatch plus `weight_decay / 2 * |W|^2`
/// (biases excluded). Overwrites `grad` when given.
pub fn minibatch_loss_and_grad(
    model: &DetectorModel,
    batch: &[(&PreparedScene, &SceneTargets)],
    weight_decay: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut loss = 0.0;
    for (scene, targets) in batch {
        loss += loss_and_grad(model, scene, targets, grad.as_deref_mut());
    }
    let scale = 1.0 / batch.len().max(1) as f64;
    loss *= scale;
    let layout = model.layout();
    let mut reg = 0.0;
    for (i, &w) in model.params.iter().enumerate() {
        if layout.is_weight(i) {
            reg += w * w;
        }
    }
    loss += 0.5 * weight_decay * reg;
    if let Some(g) = grad {
        for (i, gi) in g.iter_mut().enumerate() {
            *gi *= scale;
            if layout.is_weight(i) {
                *gi += weight_decay * model.params[i];
            }
        }
    }
    loss
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Minibatch loss per iteration, measured before the step.
    pub losses: Vec<f64>,
    pub old_draws: usize,
    pub new_draws: usize,
}

impl TrainReport {
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

fn sgd_step(
    model: &mut DetectorModel,
    batch: &[&PreparedScene],
    hyper: &TrainHyper,
    grad: &mut [f64],
) -> f64 {
    let targets: Vec<SceneTargets> = batch.iter().map(|s| assign_targets(model, s)).collect();
    let pairs: Vec<(&PreparedScene, &SceneTargets)> = batch.iter().copied().zip(targets.iter()).collect();
    let loss = minibatch_loss_and_grad(model, &pairs, hyper.weight_decay, Some(grad));
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = if norm > MAX_GRAD_NORM { MAX_GRAD_NORM / norm } else { 1.0 };
    for (p, g) in model.params.iter_mut().zip(grad.iter()) {
        *p -= hyper.lr * scale * g;
    }
    loss
}

fn normalization_stats(scenes: &[PreparedScene], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n = 0usize;
    for s in scenes {
        for cell in 0..s.features.cells {
            for (d, &v) in s.features.cell(cell).iter().enumerate() {
                sum[d] += v as f64;
                sq[d] += v as f64 * v as f64;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    // Spreading the unit variance over all dimensions keeps the expected
    // squared norm of a normalized feature at FEATURE_NORM_SQ.
    let spread = (dim as f64 / FEATURE_NORM_SQ).sqrt();
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3) * spread)
        .collect();
    (mean, std)
}

/// Trains from the current weights on `labeled` with uniform minibatches.
/// Feature normalization statistics are fitted to `labeled` first.
pub fn train_initial(
    model: &mut DetectorModel,
    labeled: &[PreparedScene],
    hyper: TrainHyper,
    seed: u64,
) -> Result<TrainReport> {
    if labeled.is_empty() {
        return Err(Error::Empty("training set"));
    }
    for s in labeled {
        model.check_features(&s.features)?;
    }
    if hyper.iterations == 0 {
        return Ok(TrainReport::default());
    }
    model.hyper = hyper;
    let (mean, std) = normalization_stats(labeled, model.config.feature_dim());
    model.set_normalization(mean, std);
    let mut rng = seeds::rng(seed);
    let mut grad = vec![0.0; model.params.len()];
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(hyper.minibatch);
    for _ in 0..hyper.iterations {
        batch.clear();
        for _ in 0..hyper.minibatch.max(1) {
            batch.push(&labeled[rng.random_range(0..labeled.len())]);
        }
        report.new_draws += batch.len();
        report.losses.push(sgd_step(model, &batch, &hyper, &mut grad));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Draw {
    Old(usize),
    New(usize),
}

/// Draws each minibatch slot from the old pool with probability λ,
/// otherwise from the new batch.
#[derive(Debug, Clone, Copy)]
pub struct MixingSampler {
    lambda: f64,
}

impl MixingSampler {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R, old_len: usize, new_len: usize) -> Draw {
        debug_assert!(old_len + new_len > 0);
        if old_len == 0 {
            return Draw::New(rng.random_range(0..new_len));
        }
        if new_len == 0 {
            return Draw::Old(rng.random_range(0..old_len));
        }
        if rng.random::<f64>() < self.lambda {
            Draw::Old(rng.random_range(0..old_len))
        } else {
            Draw::New(rng.random_range(0..new_len))
        }
    }
}

/// Fine-tunes on a mixture of old and new data, using the learning rate,
/// minibatch size and weight decay from the model's hyperparameter snapshot.
pub fn incremental_update(
    model: &mut DetectorModel,
    old_pool: &[PreparedScene],
    new_batch: &[PreparedScene],
    lambda: f64,
    iterations: usize,
    seed: u64,
) -> Result<TrainReport> {
    let sampler = MixingSampler::new(lambda)?;
    if new_batch.is_empty() {
        return Err(Error::Empty("new batch"));
    }
    let hyper = model.hyper;
    let mut rng = seeds::rng(seed);
    let mut grad = vec![0.0; model.params.len()];
    let mut report = TrainReport::default();
    let mut batch = Vec::with_capacity(hyper.minibatch);
    for _ in 0..iterations {
        batch.clear();
        for _ in 0..hyper.minibatch.max(1) {
            match sampler.draw(&mut rng, old_pool.len(), new_batch.len()) {
                Draw::Old(i) => {
                    report.old_draws += 1;
                    batch.push(&old_pool[i]);
                }
                Draw::New(i) => {
                    report.new_draws += 1;
                    batch.push(&new_batch[i]);
                }
            }
        }
        report.losses.push(sgd_step(model, &batch, &hyper, &mut grad));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{decode, GridConfig};
    use crate::synthdata::{generate_dataset, render_scene, Placement, SceneSpec};

    fn small_setup(seed: u64, n: usize) -> (DetectorModel, Vec<PreparedScene>) {
        let spec = SceneSpec {
            image_size: 48,
            min_objects: 1,
            max_objects: 2,
            min_object_size: 0.2,
            max_object_size: 0.4,
            ..SceneSpec::with_classes(3)
        };
        let mut config = GridConfig::new(48, 3);
        config.cells_x = 4;
        config.cells_y = 4;
        config.context_margin = 2;
        config.pool = 2;
        let model = DetectorModel::zeros(config).unwrap();
        let scenes = generate_dataset(&spec, n, seed).unwrap();
        let prepared = scenes.iter().map(|s| model.prepare(s).unwrap()).collect();
        (model, prepared)
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let (model, data) = small_setup(1, 4);
        let mut trained = model.clone();
        train_initial(&mut trained, &data, TrainHyper { iterations: 0, ..TrainHyper::default() }, 3).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let (mut model, _) = small_setup(1, 0);
        assert!(matches!(
            train_initial(&mut model, &[], TrainHyper::default(), 0),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn different_seeds_give_different_weights() {
        let (model, data) = small_setup(2, 12);
        let hyper = TrainHyper { iterations: 30, minibatch: 4, ..TrainHyper::default() };
        let mut a = model.clone();
        let mut b = model.clone();
        train_initial(&mut a, &data, hyper, 1).unwrap();
        train_initial(&mut b, &data, hyper, 2).unwrap();
        assert_ne!(a.params, b.params);
    }

    #[test]
    fn loss_decreases_on_learnable_task() {
        let (mut model, data) = small_setup(3, 40);
        let hyper = TrainHyper { iterations: 600, minibatch: 8, ..TrainHyper::default() };
        let report = train_initial(&mut model, &data, hyper, 5).unwrap();
        let tenth = hyper.iterations / 10;
        let first = report.mean_loss(0..tenth);
        let last = report.mean_loss(hyper.iterations - tenth..hyper.iterations);
        assert!(last < first, "first {first} last {last}");
        assert!(model.is_finite());
    }

    #[test]
    fn overfit_single_scene_recovers_boxes() {
        let spec = SceneSpec::default();
        let scene = render_scene(
            &spec,
            &[
                Placement::centered(&spec, 1, 0.3, 0.3, 0.25),
                Placement::centered(&spec, 4, 0.72, 0.68, 0.3),
            ],
            7,
        )
        .unwrap();
        let mut model = DetectorModel::zeros(GridConfig::new(96, 7)).unwrap();
        let data = vec![model.prepare(&scene).unwrap()];
        let hyper = TrainHyper { iterations: 2000, minibatch: 1, ..TrainHyper::default() };
        train_initial(&mut model, &data, hyper, 11).unwrap();
        let out = model.forward(&scene.image).unwrap();
        let dets = decode(&out, 0.2, 0.5);
        for gt in &scene.boxes {
            let cell = model.config().cell_of(gt.cx, gt.cy);
            let top = crate::detector::grid::argmax(out.class_scores(cell));
            assert_eq!(top, gt.class_id);
            assert!(
                dets.iter().any(|d| d.class_id() == gt.class_id && d.bbox.iou(&gt.bbox()) >= 0.5),
                "missing {gt:?} in {dets:?}"
            );
        }
    }

    #[test]
    fn lambda_out_of_range_is_rejected() {
        let (mut model, data) = small_setup(4, 3);
        assert!(incremental_update(&mut model, &data, &data, 1.5, 1, 0).is_err());
        assert!(incremental_update(&mut model, &data, &[], 0.5, 1, 0).is_err());
    }

    #[test]
    fn lambda_boundaries_are_exact() {
        let (model, data) = small_setup(5, 6);
        let (old, new) = data.split_at(3);
        let mut m = model.clone();
        let r = incremental_update(&mut m, old, new, 1.0, 5, 1).unwrap();
        assert_eq!(r.new_draws, 0);
        let mut m = model.clone();
        let r = incremental_update(&mut m, old, new, 0.0, 5, 1).unwrap();
        assert_eq!(r.old_draws, 0);
        let mut m = model;
        let r = incremental_update(&mut m, &[], new, 1.0, 5, 1).unwrap();
        assert_eq!(r.old_draws, 0);
    }
}
