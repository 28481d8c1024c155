//! `train`, `study` and `export`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cclis::eval::{AccuracyMatrix, Scenario};
use cclis::io::write_atomic;
use cclis::model::ModelState;
use cclis::oracle::{self, ProposalKind};
use cclis::replay::{compute_proposal, parse_snapshot};
use cclis::rng::stream;
use cclis::tasks::{gen_synthetic_stream, load_image_stream, stack_features, SyntheticConfig, TaskStream};
use cclis::trainer::{run_experiment, Preset, RunOutcome, TrainConfig};

use crate::config::ExperimentConfig;
use crate::output::{self, Summary};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const INCOMPLETE_MARKER: &str = ".incomplete";

/// One preset at one λ.
#[derive(Clone, Debug, PartialEq)]
pub struct RunGroup {
    pub label: String,
    pub preset: Preset,
    pub lambda: f64,
}

pub fn run_groups(cfg: &ExperimentConfig) -> Vec<RunGroup> {
    match &cfg.lambda_sweep {
        None => cfg
            .presets
            .iter()
            .map(|&p| RunGroup {
                label: p.name().to_string(),
                preset: p,
                lambda: p.apply(&cfg.train).lambda,
            })
            .collect(),
        Some(sweep) => cfg
            .presets
            .iter()
            .flat_map(|&p| {
                sweep.iter().map(move |&l| RunGroup {
                    label: format!("{}_lambda{l}", p.name()),
                    preset: p,
                    lambda: l,
                })
            })
            .collect(),
    }
}

impl RunGroup {
    pub fn train_config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        self.preset.apply(&TrainConfig {
            seed,
            lambda: self.lambda,
            ..base.clone()
        })
    }
}

pub fn run_dir(out: &Path, group: &RunGroup, seed: u64) -> PathBuf {
    out.join(&group.label).join(format!("seed{seed}"))
}

pub fn build_stream(cfg: &ExperimentConfig, seed: u64) -> Result<TaskStream> {
    if let Some(s) = &cfg.stream.synthetic {
        return Ok(gen_synthetic_stream(&SyntheticConfig {
            seed: s.seed.wrapping_add(seed),
            ..s.clone()
        })?);
    }
    let img = cfg.stream.image.as_ref().context("no stream source configured")?;
    load_image_stream(&img.path, &img.splits).with_context(|| format!("loading {}", img.path.display()))
}

/// Marks `out` as incomplete until [`Guard::finish`] runs.
pub struct Guard {
    marker: PathBuf,
}

impl Guard {
    pub fn start(out: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let marker = out.join(INCOMPLETE_MARKER);
        std::fs::write(&marker, b"")?;
        write_atomic(&out.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
        Ok(Self { marker })
    }

    pub fn finish(self) -> Result<()> {
        std::fs::remove_file(&self.marker)?;
        Ok(())
    }
}

/// Writes every per-run artefact into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, seed: u64, outcome: &RunOutcome) -> Result<()> {
    let matrices: Vec<&AccuracyMatrix> = cfg.eval.scenarios.iter().map(|&s| outcome.matrix(s)).collect();
    write_atomic(&dir.join("metrics.csv"), output::metrics_csv(seed, &matrices).as_bytes())?;
    for m in &matrices {
        write_atomic(&dir.join(format!("accuracy_{}.csv", m.scenario.name())), output::matrix_csv(m).as_bytes())?;
    }
    for (t, b) in outcome.buffers.iter().enumerate() {
        b.write_snapshot(&dir.join(format!("buffer_task{}.tsv", t + 1)))?;
    }
    let mut trace = String::from("task,epoch,step,lr,sample_nce,prd,total\n");
    for r in &outcome.trace {
        trace.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task + 1,
            r.epoch,
            r.step,
            r.lr,
            r.sample_nce,
            r.prd,
            r.total
        ));
    }
    write_atomic(&dir.join("loss_trace.csv"), trace.as_bytes())?;
    outcome.final_model.save_checkpoint(&dir.join("model.json"))?;
    write_atomic(&dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    Ok(())
}

fn write_summary(out: &Path, cfg: &ExperimentConfig, runs: &BTreeMap<String, Vec<BTreeMap<Scenario, AccuracyMatrix>>>) -> Result<()> {
    let mut summary = Summary {
        created_unix: output::now_unix(),
        groups: BTreeMap::new(),
    };
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for g in run_groups(cfg) {
        let Some(r) = runs.get(&g.label) else { continue };
        let s = output::summarize_group(g.preset.name(), g.lambda, &cfg.seeds, r);
        if let Some(first) = cfg.eval.scenarios.first() {
            if let Some(sc) = s.scenarios.get(first.name()) {
                series.entry(g.preset.name().to_string()).or_default().push((g.lambda, sc.final_avg_accuracy.mean));
            }
        }
        summary.groups.insert(g.label.clone(), s);
    }
    write_atomic(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    if cfg.lambda_sweep.is_some() {
        let label = format!("final {} accuracy", cfg.eval.scenarios[0].name());
        write_atomic(&out.join("lambda_sweep.svg"), output::lambda_sweep_svg(&series, &label).as_bytes())?;
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let guard = Guard::start(out, cfg)?;
    let mut runs: BTreeMap<String, Vec<BTreeMap<Scenario, AccuracyMatrix>>> = BTreeMap::new();
    for g in run_groups(cfg) {
        for &seed in &cfg.seeds {
            let stream = build_stream(cfg, seed)?;
            let tc = g.train_config(&cfg.train, seed);
            log::info!("training {} seed {seed}", g.label);
            let outcome = run_experiment(&stream, &cfg.model, &tc, &cfg.eval.probe)
                .with_context(|| format!("run {} seed {seed}", g.label))?;
            write_run(&run_dir(out, &g, seed), cfg, seed, &outcome)?;
            runs.entry(g.label.clone())
                .or_default()
                .push(cfg.eval.scenarios.iter().map(|&s| (s, outcome.matrix(s).clone())).collect());
        }
    }
    write_summary(out, cfg, &runs)?;
    guard.finish()
}

pub fn study(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let guard = Guard::start(out, cfg)?;
    let st = &cfg.study;
    let mut rows = Vec::new();
    for k in 0..st.instances {
        let seed = st.mse.seed + k;
        log::info!("estimator study instance {seed}");
        let inst = oracle::build_study_instance(&st.mse, seed)?;
        rows.extend(oracle::mse_study_instance(&inst, &st.mse, seed)?);
        if st.mse.proposals.contains(&ProposalKind::FullRetention) {
            continue;
        }
        let exact_cfg = oracle::MseStudyConfig {
            proposals: vec![ProposalKind::FullRetention],
            ..st.mse.clone()
        };
        rows.extend(oracle::mse_study_instance(&inst, &exact_cfg, seed)?);
    }
    write_atomic(&out.join("study_mse.csv"), oracle::study_csv(&rows).as_bytes())?;

    let mut sign = String::from("proposal_a,proposal_b,jm,seeds,wins,p_value\n");
    for other in [ProposalKind::Uniform, ProposalKind::Adversarial] {
        let c = oracle::compare_proposals(&st.mse, ProposalKind::TargetMean, other, st.sign_test_jm, st.sign_test_seeds)?;
        sign.push_str(&format!("target_mean,{},{},{},{},{:e}\n", other.name(), st.sign_test_jm, c.seeds, c.wins, c.p_value));
    }
    write_atomic(&out.join("study_sign_test.csv"), sign.as_bytes())?;

    let mut kl = String::from("set,linf_error,kl_closed_form,kl_oracle,iterations,random_points_beaten\n");
    let mut rng = stream(st.mse.seed, 50);
    for set in 0..st.kl_sets {
        let targets: Vec<Vec<f64>> = (0..st.kl_targets).map(|_| oracle::random_simplex_point(st.kl_support, &mut rng)).collect();
        let refs: Vec<&[f64]> = targets.iter().map(|t| t.as_slice()).collect();
        let g = compute_proposal(&refs, st.kl_support)?;
        let opt = oracle::simplex_minimize_kl(&targets)?;
        let linf = g.iter().zip(&opt.g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let f = oracle::mean_kl(&targets, &g);
        let beaten = (0..st.kl_random_points)
            .filter(|_| oracle::mean_kl(&targets, &oracle::random_simplex_point(st.kl_support, &mut rng)) >= f)
            .count();
        kl.push_str(&format!("{set},{linf:e},{f},{},{},{beaten}\n", opt.objective, opt.iterations));
    }
    write_atomic(&out.join("study_kl.csv"), kl.as_bytes())?;
    guard.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportWhat {
    Embeddings,
    Metrics,
}

pub fn export(cfg: &ExperimentConfig, out: &Path, what: ExportWhat) -> Result<()> {
    match what {
        ExportWhat::Embeddings => export_embeddings(cfg, out),
        ExportWhat::Metrics => export_metrics(cfg, out),
    }
}

fn export_embeddings(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    for g in run_groups(cfg) {
        for &seed in &cfg.seeds {
            let dir = run_dir(out, &g, seed);
            let model_path = dir.join("model.json");
            if !model_path.exists() {
                bail!("{} not found; run `cclis train` with this configuration first", model_path.display());
            }
            let model = ModelState::load_checkpoint(&model_path)?;
            let stream = build_stream(cfg, seed)?;
            let last = dir.join(format!("buffer_task{}.tsv", stream.tasks.len()));
            let text = std::fs::read_to_string(&last).with_context(|| format!("reading {}", last.display()))?;
            let in_buffer: BTreeSet<usize> = parse_snapshot(&text)?.into_iter().map(|r| r.sample_id).collect();
            let samples: Vec<_> = stream.tasks.iter().flat_map(|t| t.train.iter().chain(&t.test)).collect();
            let z = model.encode(&stack_features(samples.iter().copied())?)?;
            let mut tsv = String::from("sample_id\ttask\tclass\tin_buffer");
            for k in 0..z.cols() {
                tsv.push_str(&format!("\te{k}"));
            }
            tsv.push('\n');
            for (row, s) in samples.iter().enumerate() {
                tsv.push_str(&format!("{}\t{}\t{}\t{}", s.id, s.task + 1, s.label, u8::from(in_buffer.contains(&s.id))));
                for v in z.row(row) {
                    tsv.push_str(&format!("\t{v}"));
                }
                tsv.push('\n');
            }
            write_atomic(&dir.join("embeddings.tsv"), tsv.as_bytes())?;
        }
    }
    Ok(())
}

fn export_metrics(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut runs: BTreeMap<String, Vec<BTreeMap<Scenario, AccuracyMatrix>>> = BTreeMap::new();
    for g in run_groups(cfg) {
        for &seed in &cfg.seeds {
            let p = run_dir(out, &g, seed).join("metrics.csv");
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            runs.entry(g.label.clone()).or_default().push(output::parse_metrics_csv(&text)?);
        }
    }
    write_summary(out, cfg, &runs)
}
