//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use cclis::eval::{AccuracyMatrix, ProbeConfig, Scenario};
use cclis::losses::{objective_gradients, sample_nce, total_objective, BatchView, ObjectiveConfig, SampleSource, Weighting};
use cclis::model::{FrozenModel, ModelConfig, ModelState};
use cclis::oracle::{
    compare_proposals, estimator_mse, full_gradient, full_loss, inclusion_probabilities, mean_kl, random_simplex_point,
    simplex_minimize_kl, build_study_instance, MseStudyConfig, ProposalKind,
};
use cclis::replay::{compute_proposal, weighted_sample_without_replacement};
use cclis::rng::{seeded, stream, Rng};
use cclis::tasks::{gen_synthetic_stream, stack_features, Sample, SyntheticConfig};
use cclis::trainer::{run_experiment, train_step, Preset, RunOutcome, RunState, Sgd, TrainConfig};
use cclis_cli::parse_config_str;
use rand::Rng as _;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, pass: bool, detail: String, started: Instant) {
        if !pass {
            self.failures += 1;
        }
        println!(
            "criterion {id} [{name}]: {} ({detail}; {:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
}

fn model_cfg(input_dim: usize) -> ModelConfig {
    ModelConfig {
        input_dim,
        hidden: vec![12],
        projection_hidden: 12,
        embed_dim: 4,
        tau: 0.5,
        proto_init_std: 1.0,
    }
}

fn random_model(classes: usize, input_dim: usize, rng: &mut Rng) -> ModelState {
    let mut m = ModelState::new(&model_cfg(input_dim), rng).unwrap();
    m.grow_prototypes(classes, 1.0, rng).unwrap();
    m
}

fn random_samples(sizes: &[usize], input_dim: usize, rng: &mut Rng) -> Vec<Sample> {
    let mut out = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        for _ in 0..n {
            out.push(Sample {
                id: out.len(),
                label: c,
                task: 0,
                features: (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            });
        }
    }
    out
}

fn batch(samples: &[Sample], first_current: usize, g: &dyn Fn(&Sample) -> f64) -> BatchView {
    let classes = |cur: bool| {
        let mut v: Vec<usize> = samples.iter().map(|s| s.label).filter(|&l| (l >= first_current) == cur).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    BatchView {
        inputs: stack_features(samples).unwrap(),
        labels: samples.iter().map(|s| s.label).collect(),
        sources: samples
            .iter()
            .map(|s| if s.label >= first_current { SampleSource::Current } else { SampleSource::Buffered { g: g(s) } })
            .collect(),
        sample_ids: samples.iter().map(|s| s.id).collect(),
        current_classes: classes(true),
        buffered_classes: classes(false),
    }
}

fn full_retention(samples: &[Sample], first_current: usize) -> BatchView {
    let mut sizes = BTreeMap::new();
    for s in samples {
        *sizes.entry(s.label).or_insert(0usize) += 1;
    }
    batch(samples, first_current, &|s| 1.0 / sizes[&s.label] as f64)
}

/// Total-objective gradients against central differences.
fn gradient_check(report: &mut Report) {
    let t0 = Instant::now();
    let mut rng = seeded(1001);
    let (mut worst, mut cases, mut kinks, mut checked) = (0.0f64, [0usize; 4], 0usize, 0usize);
    let h = 1e-6;
    for inst in 0..120 {
        let k = rng.random_range(2..5);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..4)).collect();
        let samples = random_samples(&sizes, 3, &mut rng);
        let model = random_model(k, 3, &mut rng);
        let later = inst % 2 == 1;
        let lambda = if inst % 4 < 2 { 0.0 } else { 0.6 };
        cases[usize::from(later) * 2 + usize::from(lambda > 0.0)] += 1;
        let first_current = if later { rng.random_range(1..k) } else { 0 };
        let gs: Vec<f64> = samples.iter().map(|_| rng.random_range(0.05..1.0)).collect();
        let b = batch(&samples, first_current, &|s| gs[s.id]);
        let frozen = later.then(|| FrozenModel::snapshot(&random_model(k, 3, &mut rng)));
        let cfg = ObjectiveConfig {
            lambda,
            weighting: if inst % 3 == 0 { Weighting::Uniform } else { Weighting::Importance },
            ..ObjectiveConfig::default()
        };
        let scale = 1.0 / b.len() as f64;
        let (_, grads) = objective_gradients(&model, frozen.as_ref(), &b, &cfg, scale).unwrap();
        let coords: Vec<(usize, usize)> = grads.iter().enumerate().flat_map(|(p, g)| (0..g.len()).map(move |i| (p, i))).collect();
        for _ in 0..20 {
            let (p, i) = coords[rng.random_range(0..coords.len())];
            let eval = |d: f64| {
                let mut m = model.clone();
                m.params_mut()[p].1.data_mut()[i] += d;
                total_objective(&m, frozen.as_ref(), &b, &cfg).unwrap().total * scale
            };
            let (up, mid, down) = (eval(h), eval(0.0), eval(-h));
            let a = grads[p].data()[i];
            checked += 1;
            // a ReLU switching inside [-h, h], or an embedding passing near zero
            // norm, makes the one-sided slopes disagree
            let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
            if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
                kinks += 1;
                continue;
            }
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    let pass = worst < 1e-4 && cases.iter().all(|&c| c > 0) && kinks * 50 <= checked;
    report.line(
        1,
        "gradient correctness",
        pass,
        format!("120 instances x 20 coords, cases (t=1,λ=0|t=1,λ=.6|t>1,λ=0|t>1,λ=.6)={cases:?}, max rel err {worst:.2e} < 1e-4, {kinks}/{checked} coords at non-differentiable points skipped (≤ 2%)"),
        t0,
    );
}

/// Full retention with uniform g reduces the estimator to the full-data loss.
fn degeneracy(report: &mut Report) {
    let t0 = Instant::now();
    let mut rng = seeded(2002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let k = rng.random_range(2..6);
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..6)).collect();
        let samples = random_samples(&sizes, 3, &mut rng);
        let model = random_model(k, 3, &mut rng);
        let first_current = rng.random_range(0..k);
        let a = sample_nce(&model, &full_retention(&samples, first_current), Weighting::Importance).unwrap().value;
        worst = worst.max((a - full_loss(&model, &samples).unwrap()).abs());
    }

    // second task, λ = 0: trainer steps against oracle full-data gradient steps
    let samples = random_samples(&[6, 6, 6, 6], 3, &mut rng);
    let b = full_retention(&samples, 2);
    let cfg = TrainConfig {
        lambda: 0.0,
        weight_decay: 1e-4,
        ..TrainConfig::default()
    };
    let mut state = RunState::new(&model_cfg(3), &cfg, 1.0).unwrap();
    state.model = random_model(4, 3, &mut rng);
    state.frozen = Some(FrozenModel::snapshot(&state.model));
    let mut oracle_model = state.model.clone();
    let mut oracle_opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let (mut loss_gap, mut param_gap) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let reference = full_loss(&oracle_model, &samples).unwrap();
        let step = train_step(&mut state, &b, &cfg, 0.05, 0.01).unwrap();
        loss_gap = loss_gap.max((step.total - reference).abs());
        let g: Vec<_> = full_gradient(&oracle_model, &samples)
            .unwrap()
            .into_iter()
            .map(|t| t.map(|v| v / samples.len() as f64))
            .collect();
        oracle_opt.step(&mut oracle_model, &g, 0.05, 0.01).unwrap();
        for ((_, a), (_, o)) in state.model.params().into_iter().zip(oracle_model.params()) {
            param_gap = param_gap.max(a.max_abs_diff(o));
        }
    }
    let pass = worst < 1e-10 && loss_gap < 1e-9 && param_gap < 1e-9;
    report.line(
        2,
        "degeneracy to full-data loss",
        pass,
        format!("50 instances max |Δ| {worst:.2e} < 1e-10; 50-step trajectory loss gap {loss_gap:.2e}, param gap {param_gap:.2e} < 1e-9"),
        t0,
    );
}

/// Closed-form proposal against the simplex KL minimizer and random points.
fn closed_form_proposal(report: &mut Report) {
    let t0 = Instant::now();
    let mut rng = seeded(3003);
    let (mut worst, mut beaten, mut total) = (0.0f64, 0usize, 0usize);
    for _ in 0..100 {
        let d = rng.random_range(2..11);
        let n = rng.random_range(1..7);
        let skew = rng.random_range(0.5..4.0);
        let targets: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let p: Vec<f64> = random_simplex_point(d, &mut rng).into_iter().map(|v: f64| v.powf(skew)).collect();
                let s: f64 = p.iter().sum();
                p.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
        let g = compute_proposal(&refs, d).unwrap();
        let opt = simplex_minimize_kl(&targets).unwrap();
        worst = worst.max(g.iter().zip(&opt.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let f = mean_kl(&targets, &g);
        for _ in 0..1000 {
            total += 1;
            if f <= mean_kl(&targets, &random_simplex_point(d, &mut rng)) + 1e-9 {
                beaten += 1;
            }
        }
    }
    let pass = worst < 1e-6 && beaten == total;
    report.line(
        3,
        "closed-form proposal optimality",
        pass,
        format!("100 target sets: L∞ to KL oracle {worst:.2e} < 1e-6; beats {beaten}/{total} random simplex points"),
        t0,
    );
}

/// Importance-sampled gradient estimator quality.
fn estimator_quality(report: &mut Report) {
    let t0 = Instant::now();
    let cfg = MseStudyConfig::default();
    let cmp = compare_proposals(&cfg, ProposalKind::TargetMean, ProposalKind::Uniform, 4, 100).unwrap();
    let mut monotone = true;
    let mut drops = Vec::new();
    for seed in 0..5 {
        let inst = build_study_instance(&cfg, seed).unwrap();
        for kind in [ProposalKind::Uniform, ProposalKind::TargetMean] {
            let mses: Vec<(f64, f64)> = cfg
                .jm_grid
                .iter()
                .map(|&jm| estimator_mse(&inst, kind, jm, cfg.replications, &mut stream(seed, jm as u64)).unwrap())
                .collect();
            for w in mses.windows(2) {
                // decrease within 2 combined standard errors
                monotone &= w[1].0 <= w[0].0 + 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
                drops.push(w[1].0 / w[0].0);
            }
        }
    }
    let mean_drop = drops.iter().sum::<f64>() / drops.len() as f64;
    let pass = cmp.p_value < 0.05 && monotone;
    report.line(
        4,
        "importance-sampling estimator MSE",
        pass,
        format!(
            "target_mean ≤ uniform on {}/{} seeds, sign test p = {:.2e} < 0.05; MSE monotone over |J_m| ∈ {:?}: {monotone} (mean ratio per doubling {mean_drop:.2})",
            cmp.wins, cmp.seeds, cmp.p_value, cfg.jm_grid
        ),
        t0,
    );
}

/// Exponential-key sampling against brute-force enumeration.
fn inclusion_frequencies(report: &mut Report) {
    let t0 = Instant::now();
    let w = [0.4, 0.3, 0.2, 0.1];
    let exact = inclusion_probabilities(&w, 2).unwrap();
    let mut rng = seeded(5005);
    let mut counts = [0usize; 4];
    let draws = 200_000;
    for _ in 0..draws {
        for i in weighted_sample_without_replacement(&w, 2, &mut rng).unwrap() {
            counts[i] += 1;
        }
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let worst = freq.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    report.line(
        5,
        "sampling without replacement",
        worst <= 0.01,
        format!("200k draws, freq {freq:.4?} vs exact {exact:.4?}, max gap {worst:.4} ≤ 0.01"),
        t0,
    );
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Ablation ordering and evaluation-protocol checks on the synthetic stream.
fn ablation_and_protocol(report: &mut Report) {
    let t0 = Instant::now();
    let presets = [Preset::Full, Preset::NoIsNoPrd, Preset::NoPrd, Preset::RbsOnly];
    let mut runs: BTreeMap<Preset, Vec<RunOutcome>> = BTreeMap::new();
    for p in presets {
        for seed in 0..5 {
            let stream = gen_synthetic_stream(&SyntheticConfig { seed, ..SyntheticConfig::default() }).unwrap();
            let cfg = p.apply(&TrainConfig {
                seed,
                eta: 0.1,
                buffer_capacity: 20,
                ..TrainConfig::default()
            });
            let out = run_experiment(&stream, &ModelConfig::default(), &cfg, &ProbeConfig::default()).unwrap();
            runs.entry(p).or_default().push(out);
        }
    }
    let acc = |p: Preset| mean_sd(&runs[&p].iter().map(|o| o.class_il.final_average().unwrap()).collect::<Vec<_>>());
    let forget = |p: Preset| mean_sd(&runs[&p].iter().map(|o| o.class_il.average_forgetting().unwrap()).collect::<Vec<_>>()).0;
    let (full, none, is_only, rbs) = (acc(Preset::Full), acc(Preset::NoIsNoPrd), acc(Preset::NoPrd), acc(Preset::RbsOnly));
    let ci = |sd: f64| 1.96 * sd / 5f64.sqrt();
    let gap = full.0 - none.0;
    let is_ok = is_only.0 >= rbs.0 - (ci(is_only.1) + ci(rbs.1));
    let (f_full, f_noprd) = (forget(Preset::Full), forget(Preset::NoPrd));
    let pass = gap >= 0.03 && is_ok && f_full <= f_noprd;
    report.line(
        6,
        "continual-learning ablation ordering",
        pass,
        format!(
            "5 seeds, buffer 20: full {:.3}±{:.3} vs w/o IS and PRD {:.3}±{:.3} (gap {:.1} pts ≥ 3); IS {:.3}±{:.3} vs RBS only {:.3}±{:.3} (overlapping 95% CIs: {is_ok}); forgetting full {f_full:.3} ≤ no-PRD {f_noprd:.3}",
            full.0, full.1, none.0, none.1, gap * 100.0, is_only.0, is_only.1, rbs.0, rbs.1
        ),
        t0,
    );

    let t1 = Instant::now();
    let (mut cells, mut dominated, mut min_forget) = (0usize, 0usize, f64::INFINITY);
    for o in runs.values().flatten() {
        for l in 0..o.class_il.tasks() {
            for t in 0..=l {
                cells += 1;
                dominated += usize::from(o.task_il.get(l, t) >= o.class_il.get(l, t));
            }
        }
        for s in Scenario::BOTH {
            min_forget = min_forget.min(o.matrix(s).average_forgetting().unwrap());
        }
    }
    let monotone = AccuracyMatrix::from_rows(
        Scenario::ClassIl,
        vec![vec![0.5], vec![0.6, 0.7], vec![0.6, 0.8, 0.9], vec![0.9, 0.85, 0.95, 0.6]],
    )
    .unwrap();
    let mono_forget = monotone.average_forgetting().unwrap();
    let pass = dominated == cells && min_forget >= 0.0 && mono_forget == 0.0;
    report.line(
        7,
        "evaluation protocol",
        pass,
        format!("Task-IL ≥ Class-IL in {dominated}/{cells} cells; min forgetting {min_forget:.3} ≥ 0; monotone matrix forgetting {mono_forget}"),
        t1,
    );
}

/// Two identical CLI runs write identical metric tables.
fn determinism(report: &mut Report) {
    let t0 = Instant::now();
    let text = "seeds = [0, 1]\npresets = [\"full\", \"no_is_no_prd\"]\n\
                [stream.synthetic]\ntasks = 3\nn_per_class = 20\n\
                [model]\nhidden = [32]\nprojection_hidden = 32\n\
                [train]\neta = 0.1\nepochs_first_task = 5\nepochs_later = 3\nwarmup_epochs = 1\n\
                [eval.probe]\nepochs = 10\nmilestones = [6, 8]\n";
    let cfg = parse_config_str(text).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        cclis_cli::train(&cfg, d.path()).unwrap();
    }
    let (mut files, mut identical) = (0, 0);
    for g in cclis_cli::commands::run_groups(&cfg) {
        for &seed in &cfg.seeds {
            let read = |d: &tempfile::TempDir| std::fs::read(cclis_cli::commands::run_dir(d.path(), &g, seed).join("metrics.csv")).unwrap();
            files += 1;
            identical += usize::from(read(&dirs[0]) == read(&dirs[1]));
        }
    }
    report.line(
        8,
        "determinism",
        files > 0 && identical == files,
        format!("{identical}/{files} metrics.csv files byte-identical across two runs"),
        t0,
    );
}

fn main() {
    let mut report = Report { failures: 0 };
    gradient_check(&mut report);
    degeneracy(&mut report);
    closed_form_proposal(&mut report);
    estimator_quality(&mut report);
    inclusion_frequencies(&mut report);
    ablation_and_protocol(&mut report);
    determinism(&mut report);
    if report.failures > 0 {
        println!("{} acceptance criteria failed", report.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
