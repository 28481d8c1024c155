//! Sequential training: mixed current/replay batches, warmup + cosine SGD,
//! then proposal computation, buffer reselection and a model snapshot.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate_after_task, AccuracyMatrix, ProbeConfig, ProbePool, Scenario};
use crate::losses::{objective_gradients, BatchView, LossBreakdown, ObjectiveConfig, SampleSource, Weighting};
use crate::model::{FrozenModel, ModelConfig, ModelState, ParamKind};
use crate::replay::{compute_target_dists, select_buffer, ProposalTable, ReplayBuffer};
use crate::rng::{stream, Rng};
use crate::tasks::{augment, stack_features, AugmentorConfig, Sample, Task, TaskStream};
use crate::Tensor;

/// How the replay buffer is chosen at the end of each task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Weighted draws from the mean-of-targets proposal.
    #[default]
    Proposal,
    /// Uniform draws within each class.
    Uniform,
}

/// Named ablation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Full,
    NoIs,
    NoPrd,
    NoIsNoPrd,
    RbsOnly,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Full, Preset::NoIs, Preset::NoPrd, Preset::NoIsNoPrd, Preset::RbsOnly];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::NoIs => "no_is",
            Preset::NoPrd => "no_prd",
            Preset::NoIsNoPrd => "no_is_no_prd",
            Preset::RbsOnly => "rbs_only",
        }
    }

    /// Overrides selection, loss weighting and λ. `Full` and `NoIs` keep the
    /// configured λ so sweeps still apply.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        let (sel, w, keep_lambda) = match self {
            Preset::Full => (SelectionRule::Proposal, Weighting::Importance, true),
            Preset::NoIs => (SelectionRule::Uniform, Weighting::Uniform, true),
            Preset::NoPrd => (SelectionRule::Proposal, Weighting::Importance, false),
            Preset::NoIsNoPrd => (SelectionRule::Uniform, Weighting::Uniform, false),
            Preset::RbsOnly => (SelectionRule::Proposal, Weighting::Uniform, false),
        };
        c.selection = sel;
        c.weighting = w;
        if !keep_lambda {
            c.lambda = 0.0;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta: f64,
    pub eta_proto: f64,
    pub batch_size: usize,
    pub kappa_past: f64,
    pub kappa_cur: f64,
    pub lambda: f64,
    pub epochs_first_task: usize,
    pub epochs_later: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffer_capacity: usize,
    pub selection: SelectionRule,
    pub weighting: Weighting,
    /// Training-time augmentation.
    pub aug: AugmentorConfig,
    /// Augmentation used when scoring the pool for the proposal.
    pub score_aug: AugmentorConfig,
    pub score_aug_passes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            eta_proto: 0.01,
            batch_size: 64,
            kappa_past: 0.1,
            kappa_cur: 0.2,
            lambda: 0.6,
            epochs_first_task: 50,
            epochs_later: 20,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-4,
            buffer_capacity: 20,
            selection: SelectionRule::Proposal,
            weighting: Weighting::Importance,
            aug: AugmentorConfig::default(),
            score_aug: AugmentorConfig::default(),
            score_aug_passes: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("eta_proto", self.eta_proto), ("kappa_past", self.kappa_past), ("kappa_cur", self.kappa_cur)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(invalid("momentum must lie in [0, 1) and weight_decay be non-negative"));
        }
        if self.epochs_first_task == 0 || self.epochs_later == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.warmup_epochs > self.epochs_first_task.min(self.epochs_later) {
            return Err(invalid("warmup_epochs exceeds the epochs of a task"));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(invalid("batch_size must be even and at least 2"));
        }
        if self.buffer_capacity == 0 {
            return Err(invalid("buffer_capacity must be at least 1"));
        }
        if self.score_aug_passes == 0 {
            return Err(invalid("score_aug_passes must be at least 1"));
        }
        self.aug.validate()?;
        self.score_aug.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: self.lambda,
            kappa_cur: self.kappa_cur,
            kappa_past: self.kappa_past,
            weighting: self.weighting,
        }
    }

    pub fn epochs_for(&self, task_index: usize) -> usize {
        if task_index == 0 {
            self.epochs_first_task
        } else {
            self.epochs_later
        }
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then half-cosine decay to
/// zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(peak: f64, epochs: usize, warmup_epochs: usize, steps_per_epoch: usize) -> Self {
        Self {
            peak,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.peak * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }
}

/// Learning rate at `step` of `epoch` (both from 0).
pub fn lr_at(epoch: usize, step: usize, steps_per_epoch: usize, epochs: usize, warmup_epochs: usize, peak: f64) -> f64 {
    Schedule::new(peak, epochs, warmup_epochs, steps_per_epoch).at(epoch * steps_per_epoch + step)
}

/// SGD with momentum: `g' = g + wd·p` (network only), `v = μv + g'`, `p -= lr·v`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[Tensor], lr_net: f64, lr_proto: f64) -> Result<()> {
        let params = state.params_mut();
        if params.len() != grads.len() {
            return Err(invalid(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        if self.velocity.len() != params.len() || self.velocity.iter().zip(grads).any(|(v, g)| v.shape() != g.shape()) {
            self.velocity = grads.iter().map(Tensor::zeros_like).collect();
        }
        for (((kind, p), g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let (lr, wd) = match kind {
                ParamKind::Network => (lr_net, self.weight_decay),
                ParamKind::Prototype => (lr_proto, 0.0),
            };
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gd = gv + wd * *pv;
                *vv = self.momentum * *vv + gd;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub sample_nce: f64,
    pub prd: f64,
    pub total: f64,
}

/// Builds one epoch of batches. Without a buffer, batches are chunks of
/// `batch_size` current samples; with one, chunks of `batch_size/2` current
/// samples each joined by `batch_size/2` buffered samples drawn uniformly
/// with replacement.
pub fn make_batches(
    task: &Task,
    buffer: &ReplayBuffer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<BatchView>> {
    if task.train.is_empty() {
        return Err(invalid(format!("task {} has no training samples", task.index)));
    }
    if batch_size < 2 || (!buffer.is_empty() && batch_size % 2 != 0) {
        return Err(invalid("batch_size must be even and at least 2"));
    }
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    order.shuffle(rng);
    let buffered_classes = buffer.classes();
    let chunk = if buffer.is_empty() { batch_size } else { batch_size / 2 };
    let mut out = Vec::with_capacity(order.len().div_ceil(chunk));
    for idx in order.chunks(chunk) {
        let mut members: Vec<(&Sample, SampleSource)> = idx.iter().map(|&i| (&task.train[i], SampleSource::Current)).collect();
        if !buffer.is_empty() {
            let mut draw = Vec::new();
            for _ in 0..10 {
                draw = (0..batch_size / 2).map(|_| rng.random_range(0..buffer.len())).collect();
                let mut labels: Vec<usize> = members.iter().map(|m| m.0.label).collect();
                labels.extend(draw.iter().map(|&j| buffer.entries[j].sample.label));
                labels.sort_unstable();
                labels.dedup();
                if labels.len() >= 2 {
                    break;
                }
            }
            for j in draw {
                let e = &buffer.entries[j];
                members.push((&e.sample, SampleSource::Buffered { g: e.g }));
            }
        }
        out.push(BatchView {
            inputs: stack_features(members.iter().map(|m| m.0))?,
            labels: members.iter().map(|m| m.0.label).collect(),
            sources: members.iter().map(|m| m.1).collect(),
            sample_ids: members.iter().map(|m| m.0.id).collect(),
            current_classes: task.classes.clone(),
            buffered_classes: buffered_classes.clone(),
        });
    }
    Ok(out)
}

/// Independent random streams of one run.
#[derive(Clone, Debug)]
pub struct RunRngs {
    pub init: Rng,
    pub batches: Rng,
    pub aug: Rng,
    pub select: Rng,
    pub probe: Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            init: stream(seed, 0),
            batches: stream(seed, 1),
            aug: stream(seed, 2),
            select: stream(seed, 3),
            probe: stream(seed, 4),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunState {
    pub model: ModelState,
    pub model_cfg: ModelConfig,
    /// Snapshot taken at the end of the previous task.
    pub frozen: Option<FrozenModel>,
    pub buffer: ReplayBuffer,
    pub completed_tasks: usize,
    pub rngs: RunRngs,
    pub trace: Vec<StepRecord>,
    pub optimizer: Sgd,
    /// Scale that turns relative augmentation strength into input units.
    pub feature_scale: f64,
    pub last_proposal: Option<ProposalTable>,
}

impl RunState {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, feature_scale: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rngs = RunRngs::new(cfg.seed);
        let model = ModelState::new(model_cfg, &mut rngs.init)?;
        Ok(Self {
            model,
            model_cfg: model_cfg.clone(),
            frozen: None,
            buffer: ReplayBuffer::empty(cfg.buffer_capacity),
            completed_tasks: 0,
            rngs,
            trace: Vec::new(),
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
            feature_scale,
            last_proposal: None,
        })
    }
}

/// One optimisation step on `batch`; returns the loss breakdown.
pub fn train_step(state: &mut RunState, batch: &BatchView, cfg: &TrainConfig, lr_net: f64, lr_proto: f64) -> Result<LossBreakdown> {
    let (loss, grads) = objective_gradients(
        &state.model,
        state.frozen.as_ref(),
        batch,
        &cfg.objective(),
        1.0 / batch.len() as f64,
    )?;
    state.optimizer.step(&mut state.model, &grads, lr_net, lr_proto)?;
    Ok(loss)
}

/// Grows prototypes for the task's classes and runs the task's epochs.
pub fn train_task(state: &mut RunState, task: &Task, cfg: &TrainConfig) -> Result<()> {
    if task.index != state.completed_tasks {
        return Err(invalid(format!(
            "expected task {}, got task {}",
            state.completed_tasks, task.index
        )));
    }
    let have = state.model.num_prototypes();
    if task.classes.iter().any(|&c| c < have) || task.classes.iter().copied().max() != Some(have + task.classes.len() - 1) {
        return Err(invalid(format!("task {} classes are not the next unseen class ids", task.index)));
    }
    let new_rows = state
        .model
        .grow_prototypes(task.classes.len(), state.model_cfg.proto_init_std, &mut state.rngs.init)?;
    if let Some(f) = &state.frozen {
        state.frozen = Some(f.extend_prototypes(&new_rows)?);
    }
    state.optimizer.reset();
    let epochs = cfg.epochs_for(task.index);
    let chunk = if state.buffer.is_empty() { cfg.batch_size } else { cfg.batch_size / 2 };
    let steps_per_epoch = task.train.len().div_ceil(chunk);
    let net = Schedule::new(cfg.eta, epochs, cfg.warmup_epochs, steps_per_epoch);
    let proto = Schedule::new(cfg.eta_proto, epochs, cfg.warmup_epochs, steps_per_epoch);
    let mut global = 0;
    for epoch in 0..epochs {
        let batches = make_batches(task, &state.buffer, cfg.batch_size, &mut state.rngs.batches)?;
        for mut batch in batches {
            batch.inputs = augment(&batch.inputs, &cfg.aug, state.feature_scale, &mut state.rngs.aug)?;
            let (lr_net, lr_proto) = (net.at(global), proto.at(global));
            let loss = train_step(state, &batch, cfg, lr_net, lr_proto).map_err(|e| match e {
                Error::NonFinite { op } => Error::Divergence {
                    step: global,
                    detail: format!("task {} epoch {epoch}: non-finite value in {op}", task.index),
                },
                other => other,
            })?;
            if !loss.total.is_finite() || !state.model.all_finite() {
                return Err(Error::Divergence {
                    step: global,
                    detail: format!(
                        "task {} epoch {epoch}: loss {} (sample_nce {}, prd {})",
                        task.index, loss.total, loss.sample_nce, loss.prd
                    ),
                });
            }
            state.trace.push(StepRecord {
                task: task.index,
                epoch,
                step: global,
                lr: lr_net,
                sample_nce: loss.sample_nce,
                prd: loss.prd,
                total: loss.total,
            });
            global += 1;
        }
    }
    Ok(())
}

/// Training samples the buffer is reselected from: old buffer plus the task.
pub fn selection_pool(buffer: &ReplayBuffer, task: &Task) -> Vec<Sample> {
    buffer.samples().chain(&task.train).cloned().collect()
}

/// Computes the proposal with the end-of-task model, reselects the buffer
/// and stores the snapshot used for distillation in the next task.
pub fn end_task(state: &mut RunState, task: &Task, seen: &[usize], cfg: &TrainConfig) -> Result<()> {
    let snapshot = FrozenModel::snapshot(&state.model);
    let pool = selection_pool(&state.buffer, task);
    let table = match cfg.selection {
        SelectionRule::Proposal => {
            let targets = compute_target_dists(
                &snapshot,
                &pool,
                seen,
                cfg.score_aug_passes,
                &cfg.score_aug,
                state.feature_scale,
                &mut state.rngs.select,
            )?;
            ProposalTable::from_targets(&targets)?
        }
        SelectionRule::Uniform => ProposalTable::uniform(&pool),
    };
    state.buffer = select_buffer(&pool, &table, cfg.buffer_capacity, &mut state.rngs.select)?;
    state.last_proposal = Some(table);
    state.frozen = Some(snapshot);
    state.completed_tasks += 1;
    Ok(())
}

/// Everything a finished run produces.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub class_il: AccuracyMatrix,
    pub task_il: AccuracyMatrix,
    /// Buffer after each task's reselection.
    pub buffers: Vec<ReplayBuffer>,
    pub final_model: ModelState,
    pub trace: Vec<StepRecord>,
}

impl RunOutcome {
    pub fn matrix(&self, scenario: Scenario) -> &AccuracyMatrix {
        match scenario {
            Scenario::ClassIl => &self.class_il,
            Scenario::TaskIl => &self.task_il,
        }
    }
}

/// Trains on every task in order, evaluating after each.
pub fn run_experiment(stream: &TaskStream, model_cfg: &ModelConfig, cfg: &TrainConfig, probe: &ProbeConfig) -> Result<RunOutcome> {
    stream.check_invariants()?;
    probe.validate()?;
    let mcfg = ModelConfig {
        input_dim: stream.input_dim,
        ..model_cfg.clone()
    };
    let mut state = RunState::new(&mcfg, cfg, stream.feature_std())?;
    let mut class_il = AccuracyMatrix::new(Scenario::ClassIl);
    let mut task_il = AccuracyMatrix::new(Scenario::TaskIl);
    let mut buffers = Vec::with_capacity(stream.tasks.len());
    for task in &stream.tasks {
        log::info!("task {} / {}", task.index + 1, stream.tasks.len());
        train_task(&mut state, task, cfg)?;
        let seen = stream.classes_through(task.index);
        let rows = match probe.pool {
            ProbePool::BufferAndTask => {
                let pool = selection_pool(&state.buffer, task);
                let rows = evaluate_after_task(&state.model, &pool, stream, task.index, probe, &mut state.rngs.probe)?;
                end_task(&mut state, task, &seen, cfg)?;
                rows
            }
            ProbePool::BufferOnly => {
                end_task(&mut state, task, &seen, cfg)?;
                let pool: Vec<Sample> = state.buffer.samples().cloned().collect();
                evaluate_after_task(&state.model, &pool, stream, task.index, probe, &mut state.rngs.probe)?
            }
        };
        class_il.push_row(rows.0)?;
        task_il.push_row(rows.1)?;
        buffers.push(state.buffer.clone());
    }
    Ok(RunOutcome {
        class_il,
        task_il,
        buffers,
        final_model: state.model,
        trace: state.trace,
    })
}
