//! Frozen-encoder linear probe, Class-IL / Task-IL accuracy and forgetting.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{FeatureSource, ModelState};
use crate::rng::Rng;
use crate::tasks::{stack_features, Sample, TaskStream};
use crate::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ClassIl,
    TaskIl,
}

impl Scenario {
    pub const BOTH: [Scenario; 2] = [Scenario::ClassIl, Scenario::TaskIl];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ClassIl => "class_il",
            Scenario::TaskIl => "task_il",
        }
    }
}

/// Lower-triangular accuracies: `rows[l][t]` is the accuracy on task `t`
/// after training through task `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub scenario: Scenario,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario, rows: Vec::new() }
    }

    pub fn from_rows(scenario: Scenario, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(scenario);
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(invalid(format!(
                "row {} must hold {} accuracies, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(a) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(invalid(format!("accuracy {a} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, after: usize, task: usize) -> f64 {
        self.rows[after][task]
    }

    /// Mean accuracy over tasks seen so far after task `after`.
    pub fn average_accuracy(&self, after: usize) -> f64 {
        let r = &self.rows[after];
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn final_average(&self) -> Option<f64> {
        (!self.rows.is_empty()).then(|| self.average_accuracy(self.rows.len() - 1))
    }

    /// Forgetting after task `after` (needs `after ≥ 1`).
    pub fn forgetting_at(&self, after: usize) -> Result<f64> {
        if after == 0 || after >= self.rows.len() {
            return Err(invalid("forgetting needs at least two completed tasks"));
        }
        let total: f64 = (0..after)
            .map(|t| {
                let best = (t..=after).map(|l| self.rows[l][t]).fold(f64::NEG_INFINITY, f64::max);
                best - self.rows[after][t]
            })
            .sum();
        Ok(total / after as f64)
    }

    pub fn average_forgetting(&self) -> Result<f64> {
        average_forgetting(self)
    }
}

/// Mean over all but the last task of the drop from the best accuracy seen
/// so far (final row included) to the final accuracy.
pub fn average_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    if m.rows.len() < 2 {
        return Err(invalid("average forgetting needs at least two tasks"));
    }
    m.forgetting_at(m.rows.len() - 1)
}

/// Which samples the probe is trained on after each task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbePool {
    /// The buffer before reselection together with the task's training data.
    #[default]
    BufferAndTask,
    /// The reselected buffer alone.
    BufferOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub batch_size: usize,
    pub feature_source: FeatureSource,
    pub pool: ProbePool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            momentum: 0.9,
            milestones: vec![60, 75, 90],
            decay: 0.2,
            batch_size: 32,
            feature_source: FeatureSource::Projection,
            pool: ProbePool::BufferAndTask,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("probe epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.decay > 0.0) {
            return Err(invalid("probe lr and decay must be positive, momentum in [0, 1)"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.last().is_some_and(|&m| m >= self.epochs) {
            return Err(invalid("probe milestones must be strictly increasing and below epochs"));
        }
        Ok(())
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(k as i32)
    }
}

/// Per-epoch draw order cycling through shuffled classes, with a uniform
/// sample inside each drawn class. Class counts differ by at most one.
pub fn balanced_draws(members: &[Vec<usize>], draws: usize, rng: &mut Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(draws);
    let mut classes: Vec<usize> = (0..members.len()).collect();
    while out.len() < draws {
        classes.shuffle(rng);
        for &c in &classes {
            if out.len() == draws {
                break;
            }
            let m = &members[c];
            out.push(m[rng.random_range(0..m.len())]);
        }
    }
    out
}

/// Softmax classifier over features: `logits = x·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// `d × K`
    pub weight: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone())?;
        let w = tape.constant(self.weight.clone())?;
        let b = tape.constant(self.bias.clone())?;
        let xw = tape.matmul(x, w)?;
        let l = tape.add_row(xw, b)?;
        Ok(tape.value(l).clone())
    }
}

/// Trains a linear classifier on features of `pool` under class-balanced
/// sampling. Classes are columns `0..num_classes`.
pub fn train_probe_on_features(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<LinearProbe> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(invalid("empty probe training pool"));
    }
    let mut members = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(invalid(format!("label {y} outside the {num_classes} probe classes")));
        }
        members[y].push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(c));
    }
    let d = features.cols();
    let mut weight = Tensor::zeros(vec![d, num_classes])?;
    let mut bias = Tensor::zeros(vec![num_classes])?;
    let mut vw = Tensor::zeros_like(&weight);
    let mut vb = Tensor::zeros_like(&bias);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let order = balanced_draws(&members, labels.len(), rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let x = tape.constant(features.select_rows(chunk)?)?;
            let w = tape.leaf(weight.clone())?;
            let b = tape.leaf(bias.clone())?;
            let xw = tape.matmul(x, w)?;
            let l = tape.add_row(xw, b)?;
            let lp = tape.log_softmax_rows(l)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = tape.nll(lp, &targets)?;
            let mut g = tape.backward(loss)?;
            let (gw, gb) = (g.take(w).expect("leaf"), g.take(b).expect("leaf"));
            for (p, (v, gr)) in [(&mut weight, (&mut vw, gw)), (&mut bias, (&mut vb, gb))] {
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(gr.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= lr * *vv;
                }
            }
        }
    }
    Ok(LinearProbe { weight, bias })
}

/// Trains a probe on frozen features of `pool`; the model is only read.
pub fn train_linear_probe(
    model: &ModelState,
    pool: &[Sample],
    num_classes: usize,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<LinearProbe> {
    if pool.is_empty() {
        return Err(invalid("empty probe training pool"));
    }
    let x = model.features(&stack_features(pool)?, cfg.feature_source)?;
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();
    train_probe_on_features(&x, &labels, num_classes, cfg, rng)
}

/// Argmax over `allowed` columns of each logit row.
pub fn masked_argmax(logits: &Tensor, allowed: &[usize]) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = allowed[0];
            for &c in &allowed[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose masked argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize], allowed: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = masked_argmax(logits, allowed)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Class-IL and Task-IL accuracies of `probe` on the test sets of tasks
/// `0..=after`. Both scenarios share the same logits.
pub fn evaluate(
    probe: &LinearProbe,
    model: &ModelState,
    stream: &TaskStream,
    after: usize,
    source: FeatureSource,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let seen: Vec<usize> = (0..probe.num_classes()).collect();
    let mut class_il = Vec::with_capacity(after + 1);
    let mut task_il = Vec::with_capacity(after + 1);
    for task in &stream.tasks[..=after] {
        if task.test.is_empty() {
            return Err(invalid(format!("task {} has no test samples", task.index)));
        }
        let x = model.features(&stack_features(&task.test)?, source)?;
        let logits = probe.logits(&x)?;
        let labels: Vec<usize> = task.test.iter().map(|s| s.label).collect();
        class_il.push(accuracy(&logits, &labels, &seen));
        task_il.push(accuracy(&logits, &labels, &task.classes));
    }
    Ok((class_il, task_il))
}

/// Probe on `pool`, then one accuracy-matrix row per scenario.
pub fn evaluate_after_task(
    model: &ModelState,
    pool: &[Sample],
    stream: &TaskStream,
    after: usize,
    cfg: &ProbeConfig,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = stream.classes_through(after).len();
    let probe = train_linear_probe(model, pool, k, cfg, rng)?;
    evaluate(&probe, model, stream, after, cfg.feature_source)
}
