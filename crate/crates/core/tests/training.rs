mod common;

use std::collections::BTreeSet;

use cclis::eval::{accuracy, train_probe_on_features, ProbeConfig};
use cclis::losses::objective_gradients;
use cclis::model::{FrozenModel, ModelConfig, ParamKind};
use cclis::replay::{target_dists_from_scores, ProposalTable};
use cclis::rng::seeded;
use cclis::tasks::{gen_synthetic_stream, Sample, SyntheticConfig};
use cclis::trainer::{end_task, make_batches, run_experiment, train_task, RunState, Sgd, TrainConfig};
use cclis::Tensor;
use rand::Rng as _;

fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        eta: 0.1,
        epochs_first_task: 4,
        epochs_later: 3,
        warmup_epochs: 1,
        batch_size: 16,
        score_aug_passes: 2,
        ..TrainConfig::default()
    }
}

fn quick_probe() -> ProbeConfig {
    ProbeConfig {
        epochs: 10,
        milestones: vec![6, 8],
        ..ProbeConfig::default()
    }
}

fn small_stream(seed: u64) -> cclis::tasks::TaskStream {
    gen_synthetic_stream(&SyntheticConfig {
        tasks: 3,
        n_per_class: 20,
        input_dim: 6,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn small_model_cfg(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        hidden: vec![16],
        projection_hidden: 16,
        ..ModelConfig::default()
    }
}

#[test]
fn test_samples_never_reach_batches_or_buffer() {
    let stream = small_stream(3);
    let test_ids: BTreeSet<usize> = stream.tasks.iter().flat_map(|t| t.test.iter().map(|s| s.id)).collect();
    let cfg = quick_train(3);
    let mut state = RunState::new(&small_model_cfg(6), &cfg, stream.feature_std()).unwrap();
    for task in &stream.tasks {
        let mut rng = seeded(task.index as u64);
        for b in make_batches(task, &state.buffer, cfg.batch_size, &mut rng).unwrap() {
            assert!(b.sample_ids.iter().all(|id| !test_ids.contains(id)));
        }
        train_task(&mut state, task, &cfg).unwrap();
        end_task(&mut state, task, &stream.classes_through(task.index), &cfg).unwrap();
        assert!(state.buffer.samples().all(|s| !test_ids.contains(&s.id)));
        assert_eq!(state.buffer.len(), cfg.buffer_capacity);
    }
}

#[test]
fn sgd_step_matches_reference_formula() {
    let mut rng = seeded(11);
    let samples = common::random_samples(&[3, 3, 2], 4, &mut rng);
    let batch = common::batch_with(&samples, 2, |_| 0.25);
    let mut state = common::small_model(3, 4, 5);
    let frozen = FrozenModel::snapshot(&common::small_model(3, 4, 6));
    let obj = TrainConfig::default().objective();
    let (mu, wd, lr_net, lr_proto) = (0.9, 1e-3, 0.07, 0.02);
    let mut opt = Sgd::new(mu, wd);
    let mut velocity: Vec<Vec<f64>> = Vec::new();
    for step in 0..3 {
        let (_, grads) = objective_gradients(&state, Some(&frozen), &batch, &obj, 1.0 / batch.len() as f64).unwrap();
        let before: Vec<(ParamKind, Vec<f64>)> = state.params().into_iter().map(|(k, t)| (k, t.data().to_vec())).collect();
        if step == 0 {
            velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        let mut expected = Vec::new();
        for ((kind, p), (g, v)) in before.iter().zip(grads.iter().zip(velocity.iter_mut())) {
            let (lr, decay) = if *kind == ParamKind::Prototype { (lr_proto, 0.0) } else { (lr_net, wd) };
            let mut out = p.clone();
            for k in 0..p.len() {
                v[k] = mu * v[k] + g.data()[k] + decay * p[k];
                out[k] = p[k] - lr * v[k];
            }
            expected.push(out);
        }
        opt.step(&mut state, &grads, lr_net, lr_proto).unwrap();
        for ((_, t), e) in state.params().into_iter().zip(&expected) {
            for (a, b) in t.data().iter().zip(e) {
                assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn random_features_give_chance_class_il_accuracy() {
    let mut rng = seeded(21);
    let classes = 10;
    let mut draw = |n: usize| {
        let x = Tensor::new(vec![n, 8], (0..n * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
        (x, y)
    };
    let (xtr, ytr) = draw(500);
    let (xte, yte) = draw(4000);
    let probe = train_probe_on_features(&xtr, &ytr, classes, &ProbeConfig::default(), &mut seeded(1)).unwrap();
    let a = accuracy(&probe.logits(&xte).unwrap(), &yte, &(0..classes).collect::<Vec<_>>());
    // 3.5 standard errors of a Bernoulli(0.1) mean over 4000 draws
    let tol = 3.5 * (0.1f64 * 0.9 / 4000.0).sqrt();
    assert!((a - 0.1).abs() < tol, "accuracy {a}");
}

#[test]
fn same_seed_same_outcome() {
    let stream = small_stream(1);
    let run = || run_experiment(&stream, &small_model_cfg(6), &quick_train(1), &quick_probe()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.class_il, b.class_il);
    assert_eq!(a.task_il, b.task_il);
    assert_eq!(a.final_model, b.final_model);
    let snaps = |o: &cclis::trainer::RunOutcome| o.buffers.iter().map(|x| x.snapshot_tsv()).collect::<Vec<_>>();
    assert_eq!(snaps(&a), snaps(&b));
}

#[test]
fn task_il_dominates_class_il() {
    let stream = small_stream(2);
    let out = run_experiment(&stream, &small_model_cfg(6), &quick_train(2), &quick_probe()).unwrap();
    for l in 0..out.class_il.tasks() {
        for t in 0..=l {
            assert!(out.task_il.get(l, t) >= out.class_il.get(l, t));
        }
    }
}

#[test]
fn margin_samples_get_more_proposal_mass_than_centers() {
    // two classes on a line: centres at ±2, margin samples near 0
    let mut rng = seeded(4);
    let mut pool = Vec::new();
    let mut margin = BTreeSet::new();
    for class in 0..2usize {
        let centre = if class == 0 { -2.0 } else { 2.0 };
        for k in 0..20 {
            let near_edge = k < 5;
            let x = if near_edge { centre * 0.1 } else { centre } + rng.random_range(-0.2..0.2);
            let id = pool.len();
            if near_edge {
                margin.insert(id);
            }
            pool.push(Sample {
                id,
                label: class,
                task: 0,
                features: vec![x, rng.random_range(-0.5..0.5)],
            });
        }
    }
    // unit-normalized embedding = input direction, prototypes at ±e_1
    let tau = 0.5;
    let protos = [[-1.0, 0.0], [1.0, 0.0]];
    let mut scores = Tensor::zeros(vec![2, pool.len()]).unwrap();
    for (j, s) in pool.iter().enumerate() {
        let n = (s.features[0].powi(2) + s.features[1].powi(2)).sqrt();
        for (i, c) in protos.iter().enumerate() {
            scores.row_mut(i)[j] = (c[0] * s.features[0] + c[1] * s.features[1]) / n / tau;
        }
    }
    let table = ProposalTable::from_targets(&target_dists_from_scores(&scores, &pool, &[0, 1]).unwrap()).unwrap();
    for class in 0..2 {
        let (mut edge, mut centre) = (Vec::new(), Vec::new());
        for &(id, g) in &table.classes[&class] {
            if margin.contains(&id) { edge.push(g) } else { centre.push(g) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&edge) > mean(&centre), "class {class}");
    }
}
