//! Independent oracles and the numbered acceptance checks. Shared by the
//! crate's integration tests and the workspace acceptance runner.
#![allow(dead_code)]

use std::collections::BTreeSet;

use alkit_core::detector::{
    assign_targets, incremental_update, minibatch_loss_and_grad, DetectorModel, GridConfig, GridOutput,
    MixingSampler, Draw, PreparedScene, TrainHyper,
};
use alkit_core::gp::{
    emoc, emoc_with_rejection, mc_class_probabilities, mean_discovered, run_discovery_sweep, DiscoveryConfig,
    DiscoveryMethod, GpLabel, GpModel, Kernel, PosteriorPrediction,
};
use alkit_core::metrics::{
    aggregate_avg, aggregate_max, aggregate_sum, det_class_diff, margin_1vs2, value_batch, weighted_cell_sum,
    MetricKind,
};
use alkit_core::protocol::{
    auc, prepare_task, run_sweep, simulated_oracle, write_curves_csv, CurveField, ExperimentConfig,
    ExplorationTask, RunRecord,
};
use alkit_core::seeds;
use alkit_core::synthdata::{generate_scene, SceneSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Single-slot grid with one row of cells.
pub fn grid_row(cells: &[(f64, Vec<f64>)]) -> GridOutput {
    let k = cells[0].1.len();
    let scores = cells.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let confs = cells.iter().map(|(c, _)| *c).collect();
    let geom = vec![[0.5, 0.5, 0.2, 0.2]; cells.len()];
    GridOutput::new(cells.len(), 1, 1, k, scores, confs, geom).expect("valid grid")
}

pub fn metric_exactness() -> Check {
    let tol = 1e-12;
    let mut failures = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if !close(got, want, tol) {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };
    expect("1vs2 one-hot", margin_1vs2(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    expect("1vs2 uniform", margin_1vs2(&[0.25; 4]).unwrap(), 1.0);
    expect("1vs2 (.6,.3,.1)", margin_1vs2(&[0.6, 0.3, 0.1]).unwrap(), 0.7);
    let list = [0.7, 0.4, 0.1];
    expect("sum []", aggregate_sum(&[]), 0.0);
    expect("sum", aggregate_sum(&list), 1.2);
    expect("sum single", aggregate_sum(&[0.5]), 0.5);
    expect("avg []", aggregate_avg(&[]), 0.0);
    expect("avg", aggregate_avg(&list), 0.4);
    expect("avg single", aggregate_avg(&[0.5]), 0.5);
    expect("max []", aggregate_max(&[]), 0.0);
    expect("max", aggregate_max(&list), 0.7);
    expect("max single", aggregate_max(&[0.5]), 0.5);
    expect("avg of two detections", aggregate_avg(&[0.7, 0.4]), 0.55);
    expect("batch []", value_batch(&[]), 0.0);
    expect("batch", value_batch(&[1.2, 0.0, 0.3]), 1.5);

    let perfect = grid_row(&[(1.0, vec![1.0, 0.0, 0.0]), (1.0, vec![0.0, 0.0, 1.0])]);
    expect("dcd perfect", det_class_diff(&perfect), 0.0);
    expect("dcd single", det_class_diff(&grid_row(&[(0.9, vec![0.4, 0.3, 0.3])])), 0.25);
    let two = grid_row(&[(0.8, vec![0.3, 0.3, 0.2, 0.2]), (0.2, vec![0.9, 0.05, 0.03, 0.02])]);
    expect("dcd two cells", det_class_diff(&two), 0.74);
    let dark = grid_row(&[(0.0, vec![0.5, 0.5]), (0.0, vec![0.2, 0.8])]);
    expect("wcs zero conf", weighted_cell_sum(&dark).unwrap(), 0.0);
    expect("wcs uniform", weighted_cell_sum(&grid_row(&[(1.0, vec![0.5, 0.5])])).unwrap(), 1.0);
    expect("wcs half", weighted_cell_sum(&grid_row(&[(0.5, vec![0.6, 0.3, 0.1])])).unwrap(), 0.1225);
    if margin_1vs2(&[1.0]).is_ok() {
        failures.push("1vs2 accepted K=1".into());
    }
    Check::new(failures.is_empty(), if failures.is_empty() { "23 examples exact to 1e-12".into() } else { failures.join("; ") })
}

pub fn aggregation_order(seed: u64) -> Check {
    let mut rng = seeds::rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..40);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (s, a, m) = (aggregate_sum(&v), aggregate_avg(&v), aggregate_max(&v));
        if !(a <= m && m <= s) {
            return Check::new(false, format!("order violated on {v:?}"));
        }
        worst = worst.max((s - n as f64 * a).abs());
    }
    Check::new(worst <= 1e-12, format!("1000 lists, max |Sum - |D|Avg| = {worst:.1e}"))
}

/// 4x4 grid, two slots per cell, three classes, random weights and one
/// rejected cell, against central differences.
pub fn gradient_check(seed: u64) -> Check {
    let mut config = GridConfig::new(96, 3);
    config.cells_x = 4;
    config.cells_y = 4;
    config.boxes_per_cell = 2;
    let mut model = DetectorModel::random(config, 0.05, seed).unwrap();
    let spec = SceneSpec { min_objects: 2, max_objects: 4, ..SceneSpec::with_classes(3) };
    let mut scene = model.prepare(&generate_scene(&spec, seed).unwrap()).unwrap();
    scene.negative_cells.push(15);
    let targets = assign_targets(&model, &scene);
    let batch = [(&scene, &targets)];
    let wd = 1e-3;
    let mut analytic = vec![0.0; model.params().len()];
    minibatch_loss_and_grad(&model, &batch, wd, Some(&mut analytic));
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut diff2 = 0.0;
    let mut norm2 = 0.0;
    for i in 0..analytic.len() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = minibatch_loss_and_grad(&model, &batch, wd, None);
        model.params_mut()[i] = orig - h;
        let down = minibatch_loss_and_grad(&model, &batch, wd, None);
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
        diff2 += (a - numeric).powi(2);
        norm2 += a * a;
    }
    let global = (diff2 / norm2).sqrt();
    Check::new(
        worst <= 1e-4,
        format!("{} params, max relative error {worst:.2e}, norm-wise {global:.2e}", analytic.len()),
    )
}

pub fn lambda_mixing(seed: u64) -> Check {
    let mut config = GridConfig::new(96, 2);
    config.cells_x = 2;
    config.cells_y = 2;
    let spec = SceneSpec::with_classes(2);
    let model = DetectorModel::random(config, 0.01, seed).unwrap();
    let scenes: Vec<PreparedScene> =
        (0..6).map(|i| model.prepare(&generate_scene(&spec, seed + i).unwrap()).unwrap()).collect();
    let (old, new) = scenes.split_at(4);
    // 100 iterations of 16 slots.
    let half = incremental_update(&mut model.clone(), old, new, 0.5, 100, seed).unwrap();
    let slots = half.old_draws + half.new_draws;
    let frac = half.old_draws as f64 / slots as f64;
    let zero = incremental_update(&mut model.clone(), old, new, 0.0, 10, seed).unwrap();
    let one = incremental_update(&mut model.clone(), old, new, 1.0, 10, seed).unwrap();
    let mut rng = seeds::rng(seed);
    let exact0 = (0..10_000).all(|_| matches!(MixingSampler::new(0.0).unwrap().draw(&mut rng, 5, 5), Draw::New(_)));
    let exact1 = (0..10_000).all(|_| matches!(MixingSampler::new(1.0).unwrap().draw(&mut rng, 5, 5), Draw::Old(_)));
    let passed = slots == 1600
        && (0.45..=0.55).contains(&frac)
        && zero.old_draws == 0
        && one.new_draws == 0
        && exact0
        && exact1;
    Check::new(passed, format!("old fraction {frac:.4} over {slots} slots; lambda 0 and 1 exact: {}", zero.old_draws == 0 && one.new_draws == 0 && exact0 && exact1))
}

fn reveal(scenes: &[alkit_core::protocol::UnlabeledScene]) -> Vec<PreparedScene> {
    scenes
        .iter()
        .map(|u| PreparedScene {
            features: u.features.clone(),
            boxes: simulated_oracle(u).unwrap(),
            negative_cells: Vec::new(),
        })
        .collect()
}

/// Labels the whole new part at once and compares old-class mAP after a
/// 1000-iteration update with and without replay.
pub fn forgetting(seeds_n: u64) -> Check {
    let task = ExplorationTask::default();
    let (mut pre, mut replay, mut plain) = (0.0, 0.0, 0.0);
    for seed in 0..seeds_n {
        let p = prepare_task(&task, seed).unwrap();
        let known = p.tests.known_classes.clone();
        let old_map = |m: &DetectorModel| {
            alkit_core::detector::evaluate_map(m, &p.tests.known, 0.5).unwrap().map_over(known.iter().copied())
        };
        pre += old_map(&p.initial_model);
        let new_batch = reveal(&p.unlabeled);
        let update_seed = seeds::derive(seed, seeds::STREAM_UPDATE, 0);
        for (lambda, acc) in [(0.5, &mut replay), (0.0, &mut plain)] {
            let mut m = p.initial_model.clone();
            incremental_update(&mut m, &p.labeled, &new_batch, lambda, 1000, update_seed).unwrap();
            *acc += old_map(&m);
        }
    }
    let n = seeds_n as f64;
    let (pre, replay, plain) = (pre / n, replay / n, plain / n);
    Check::new(
        replay > plain && replay >= 0.7 * pre,
        format!("old-class mAP before {pre:.3}, lambda=0.5 {replay:.3}, lambda=0 {plain:.3}"),
    )
}

/// One-sided sign test: probability of at least `wins` heads in `n` fair flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for k in wins..=n {
        total += binomial(n, k);
    }
    total / 2f64.powi(n as i32)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

pub fn active_vs_random(seeds_n: u64) -> Check {
    let task = ExplorationTask::default();
    let config = ExperimentConfig::default();
    let seed_list: Vec<u64> = (0..seeds_n).collect();
    let runs = run_sweep(&task, &config, &[MetricKind::Sum, MetricKind::Random], &seed_list).unwrap();
    let area = |r: &RunRecord| auc(&r.curve, CurveField::MapNew, config.eval_every).unwrap();
    let (sum_runs, random_runs) = runs.split_at(seed_list.len());
    let pairs: Vec<(f64, f64)> = sum_runs.iter().zip(random_runs).map(|(s, r)| (area(s), area(r))).collect();
    let wins = pairs.iter().filter(|(s, r)| s > r).count();
    let decided = pairs.iter().filter(|(s, r)| s != r).count();
    let p = sign_test_p(wins, decided);
    let n = pairs.len() as f64;
    let mean_s = pairs.iter().map(|x| x.0).sum::<f64>() / n;
    let mean_r = pairs.iter().map(|x| x.1).sum::<f64>() / n;
    Check::new(
        mean_s > mean_r && p < 0.05,
        format!("new-class AUC sum {mean_s:.4} vs random {mean_r:.4}, sum wins {wins}/{decided}, sign test p={p:.3}"),
    )
}

/// Dense posterior from a direct Cholesky solve of the full system.
pub struct DenseGp {
    means: Vec<DVector<f64>>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    inputs: Vec<Vec<f64>>,
    kernel: Kernel,
}

impl DenseGp {
    pub fn fit(inputs: &[Vec<f64>], labels: &[GpLabel], classes: &[usize], kernel: Kernel, noise: f64) -> Self {
        let n = inputs.len();
        let gram = DMatrix::from_fn(n, n, |i, j| kernel.eval(&inputs[i], &inputs[j]) + if i == j { noise } else { 0.0 });
        let chol = gram.cholesky().expect("positive definite");
        let means = classes
            .iter()
            .map(|&c| {
                let y = DVector::from_fn(n, |i, _| if labels[i] == GpLabel::Class(c) { 1.0 } else { -1.0 });
                chol.solve(&y)
            })
            .collect();
        Self { means, chol, inputs: inputs.to_vec(), kernel }
    }

    pub fn predict(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let kx = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|p| self.kernel.eval(p, x)));
        let means = self.means.iter().map(|a| kx.dot(a)).collect();
        let var = self.kernel.eval(x, x) - kx.dot(&self.chol.solve(&kx));
        (means, var)
    }
}

fn random_point<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()
}

fn random_label<R: Rng>(rng: &mut R, classes: usize) -> GpLabel {
    if rng.random_range(0..8) == 0 {
        GpLabel::Negative
    } else {
        GpLabel::Class(rng.random_range(0..classes))
    }
}

pub fn gp_correctness(seed: u64) -> Check {
    let mut rng = seeds::rng(seed);
    let kernel = Kernel::Rbf { gamma: 0.7 };
    let noise = 0.05;
    let dim = 3;

    // Dense oracle.
    let mut oracle_err = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..25);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| random_point(&mut rng, dim)).collect();
        let labels: Vec<GpLabel> = (0..n).map(|_| random_label(&mut rng, 4)).collect();
        let Ok(model) = GpModel::fit(&inputs, &labels, kernel, noise) else { continue };
        let dense = DenseGp::fit(&inputs, &labels, model.classes(), kernel, noise);
        for _ in 0..10 {
            let x = random_point(&mut rng, dim);
            let got = model.predict(&x).unwrap();
            let (means, var) = dense.predict(&x);
            for (a, b) in got.means.iter().zip(&means) {
                oracle_err = oracle_err.max((a - b).abs());
            }
            oracle_err = oracle_err.max((got.variance - var).abs());
        }
    }

    // Rank-1 updates against refits.
    let mut update_err = 0.0f64;
    let probes: Vec<Vec<f64>> = (0..8).map(|_| random_point(&mut rng, dim)).collect();
    let mut inputs = vec![random_point(&mut rng, dim)];
    let mut labels = vec![GpLabel::Class(0)];
    let mut model = GpModel::fit(&inputs, &labels, kernel, noise).unwrap();
    for _ in 0..50 {
        let x = random_point(&mut rng, dim);
        let y = random_label(&mut rng, 5);
        model.update_in_place(&x, y).unwrap();
        inputs.push(x);
        labels.push(y);
        let refit = GpModel::fit(&inputs, &labels, kernel, noise).unwrap();
        for p in &probes {
            let (a, b) = (model.predict(p).unwrap(), refit.predict(p).unwrap());
            for (u, v) in a.means.iter().zip(&b.means) {
                update_err = update_err.max((u - v).abs());
            }
            update_err = update_err.max((a.variance - b.variance).abs());
        }
    }

    // Variance never grows as points are added.
    let mut model = GpModel::empty(kernel, noise, dim).unwrap();
    let mut last: Vec<f64> = probes.iter().map(|p| model.predict(p).unwrap().variance).collect();
    let mut violations = 0;
    for _ in 0..1000 {
        let x = random_point(&mut rng, dim);
        let y = random_label(&mut rng, 5);
        model.update_in_place(&x, y).unwrap();
        for (p, prev) in probes.iter().zip(last.iter_mut()) {
            let v = model.predict(p).unwrap().variance;
            if v > *prev + 1e-12 {
                violations += 1;
            }
            *prev = v;
        }
    }
    Check::new(
        oracle_err <= 1e-10 && update_err <= 1e-8 && violations == 0,
        format!("dense oracle {oracle_err:.1e}, 50-step updates {update_err:.1e}, variance increases {violations}/8000"),
    )
}

pub fn probit_first_class(mean0: f64, mean1: f64, variance: f64) -> f64 {
    Normal::standard().cdf((mean0 - mean1) / (2.0 * variance).sqrt())
}

pub fn mc_convergence(seed: u64) -> Check {
    let configs = [(0.3, -0.2, 0.5), (0.9, 0.85, 0.1), (-0.4, 0.6, 1.3), (0.0, 0.0, 0.7)];
    let mut report = Vec::new();
    let mut passed = true;
    for z in [100usize, 10_000, 1_000_000] {
        let mut worst = 0.0f64;
        for (i, &(m0, m1, var)) in configs.iter().enumerate() {
            let pred = PosteriorPrediction { means: vec![m0, m1], variance: var };
            let p = mc_class_probabilities(&pred, z, seeds::derive(seed, seeds::STREAM_MC, i as u64)).unwrap();
            worst = worst.max((p[0] - probit_first_class(m0, m1, var)).abs());
        }
        passed &= worst <= 3.0 / (z as f64).sqrt();
        report.push(format!("Z={z}: {worst:.2e} (bound {:.1e})", 3.0 / (z as f64).sqrt()));
    }
    Check::new(passed, report.join(", "))
}

/// Retrains once per hypothetical label and measures the mean L1 change
/// of every output over the evaluation points.
pub fn brute_force_emoc(model: &GpModel, x: &[f64], eval: &[Vec<f64>], probs: &[f64]) -> f64 {
    let before: Vec<Vec<f64>> = eval.iter().map(|e| model.predict(e).unwrap().means).collect();
    let mut total = 0.0;
    for (&c, &p) in model.classes().iter().zip(probs) {
        let mut inputs = model.inputs().to_vec();
        let mut labels = model.labels().to_vec();
        inputs.push(x.to_vec());
        labels.push(GpLabel::Class(c));
        let refit = GpModel::fit(&inputs, &labels, model.kernel(), model.noise()).unwrap();
        let mut change = 0.0;
        for (e, b) in eval.iter().zip(&before) {
            let after = refit.predict(e).unwrap().means;
            change += after.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>();
        }
        total += p * change / eval.len() as f64;
    }
    total
}

pub fn emoc_oracle(seed: u64) -> Check {
    let mut rng = seeds::rng(seed);
    let mut worst = 0.0f64;
    let mut scaling_exact = true;
    for instance in 0..30 {
        let dim = rng.random_range(1..5);
        let kernel = if instance % 3 == 2 { Kernel::Linear { bias: 1.0 } } else { Kernel::Rbf { gamma: rng.random_range(0.2..2.0) } };
        let noise = rng.random_range(0.01..0.5);
        let classes = rng.random_range(2..5);
        let n = rng.random_range(classes..=20);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| random_point(&mut rng, dim)).collect();
        // Every class appears at least once.
        let labels: Vec<GpLabel> =
            (0..n).map(|i| GpLabel::Class(if i < classes { i } else { rng.random_range(0..classes) })).collect();
        let model = GpModel::fit(&inputs, &labels, kernel, noise).unwrap();
        let eval: Vec<Vec<f64>> = (0..rng.random_range(1..=20)).map(|_| random_point(&mut rng, dim)).collect();
        let x = random_point(&mut rng, dim);
        let probs = mc_class_probabilities(&model.predict(&x).unwrap(), 500, seed + instance).unwrap();
        let fast = emoc(&model, &x, &eval, &probs).unwrap();
        let slow = brute_force_emoc(&model, &x, &eval, &probs);
        worst = worst.max((fast - slow).abs());
        let p_r: f64 = rng.random_range(0.0..1.0);
        scaling_exact &= emoc_with_rejection(fast, p_r) == (1.0 - p_r) * fast;
    }
    Check::new(
        worst <= 1e-6 && scaling_exact,
        format!("30 instances, max |efficient - retrained| = {worst:.1e}; rejection scaling exact: {scaling_exact}"),
    )
}

pub fn discovery(tasks: usize, inits: usize, seed: u64) -> Check {
    let config = DiscoveryConfig::default();
    let methods = [DiscoveryMethod::Emoc, DiscoveryMethod::Random];
    let rows = run_discovery_sweep(&config, &methods, tasks, inits, seed).unwrap();
    let mut shape_ok = true;
    let mut runs = BTreeSet::new();
    for r in &rows {
        runs.insert((r.method.clone(), r.task, r.init));
    }
    for (method, task, init) in &runs {
        let mut curve: Vec<_> = rows.iter().filter(|r| &r.method == method && r.task == *task && r.init == *init).collect();
        curve.sort_by_key(|r| r.query_index);
        shape_ok &= curve[0].discovered_classes == config.initial_classes;
        shape_ok &= curve.windows(2).all(|w| w[0].discovered_classes <= w[1].discovered_classes);
    }
    let e = mean_discovered(&rows, DiscoveryMethod::Emoc.name());
    let r = mean_discovered(&rows, DiscoveryMethod::Random.name());
    Check::new(
        shape_ok && e[10] > r[10],
        format!(
            "{} runs; mean discovered at query 10: emoc {:.2}, random {:.2}; curves start at {} and are monotone: {shape_ok}",
            runs.len(),
            e[10],
            r[10],
            config.initial_classes
        ),
    )
}

/// A task small enough to replay quickly.
pub fn small_task() -> ExplorationTask {
    ExplorationTask {
        pool_scenes: 120,
        max_unlabeled: 40,
        test_scenes: 40,
        initial: TrainHyper { iterations: 300, ..TrainHyper::default() },
        ..ExplorationTask::default()
    }
}

pub fn small_config(metric: MetricKind) -> ExperimentConfig {
    ExperimentConfig { metric, update_iterations: 20, eval_every: 10, ..ExperimentConfig::default() }
}

/// Selections and curve CSV of one logged run.
pub fn replay(metric: MetricKind, seed: u64) -> (Vec<usize>, Vec<u8>) {
    let task = small_task();
    let prepared = prepare_task(&task, seed).unwrap();
    let (run, curve) = prepared.explore(small_config(metric), seed).unwrap();
    let record = RunRecord { method: metric.name().to_string(), seed, curve };
    let mut csv = Vec::new();
    write_curves_csv(&mut csv, &task.scenes.class_names(), &[record]).unwrap();
    (run.selections().to_vec(), csv)
}

pub fn determinism(seed: u64) -> Check {
    let mut passed = true;
    let mut detail = Vec::new();
    for metric in [MetricKind::Sum, MetricKind::Random] {
        let (sel_a, csv_a) = replay(metric, seed);
        let (sel_b, csv_b) = replay(metric, seed);
        let same = sel_a == sel_b && csv_a == csv_b;
        passed &= same && !sel_a.is_empty();
        detail.push(format!("{}: {} selections, {} CSV bytes, identical {same}", metric.name(), sel_a.len(), csv_a.len()));
    }
    Check::new(passed, detail.join("; "))
}
