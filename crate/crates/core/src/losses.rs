//! Sample-NCE, prototype-instance relation distillation (PRD) and their sum.
//!
//! Every batch sample is an anchor for its own class prototype. For prototype
//! `i` the partition function over the batch is
//!
//! ```text
//! Ŵ_i = Σ_{k current or class(k) = i} exp(s_ik)
//!     + Σ_{m ≠ i buffered} Σ_{k ∈ J_m} exp(s_ik) / (g_k · |J_m|)
//! ```
//!
//! where `|J_m|` counts class-`m` buffered samples present in the batch. The
//! importance weights enter as additive log-offsets `-ln(g_k |J_m|)` inside a
//! row-wise log-sum-exp, so `Ŵ_i` depends only on `i` and the whole loss is
//! `Σ_i n_i · ln Ŵ_i - Σ_j s_{y_j j}`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{BoundModel, FrozenModel, ModelState};
use crate::{Tape, Tensor, Var};

/// Where a batch sample came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleSource {
    Current,
    /// Replay-buffer sample with its stored proposal probability.
    Buffered { g: f64 },
}

/// One training mini-batch: current-task samples plus buffered samples.
#[derive(Clone, Debug)]
pub struct BatchView {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub sources: Vec<SampleSource>,
    pub sample_ids: Vec<usize>,
    /// Classes of the current task.
    pub current_classes: Vec<usize>,
    /// Classes held in the replay buffer.
    pub buffered_classes: Vec<usize>,
}

impl BatchView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn distinct_classes(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.labels.len();
        if self.sources.len() != n || self.inputs.rows() != n {
            return Err(invalid(format!(
                "batch has {n} labels, {} sources, {} input rows",
                self.sources.len(),
                self.inputs.rows()
            )));
        }
        for (pos, (&y, src)) in self.labels.iter().zip(&self.sources).enumerate() {
            match *src {
                SampleSource::Current => {
                    if !self.current_classes.contains(&y) {
                        return Err(invalid(format!("current sample {pos} has label {y} outside the task classes")));
                    }
                }
                SampleSource::Buffered { g } => {
                    if !(g > 0.0) {
                        return Err(Error::DegenerateProposal { position: pos, weight: g });
                    }
                    if g > 1.0 {
                        return Err(invalid(format!("proposal weight {g} above 1 at position {pos}")));
                    }
                    if !self.buffered_classes.contains(&y) {
                        return Err(invalid(format!("buffered sample {pos} has label {y} outside the buffer classes")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// How buffered negatives are weighted in the partition function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `exp(s) / (g · |J_m|)` for buffered negatives.
    #[default]
    Importance,
    /// Plain in-batch softmax; buffered negatives count once each.
    Uniform,
}

/// Per-prototype diagnostics of one Sample-NCE evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NceDiagnostics {
    /// Summed anchor loss per prototype present in the batch.
    pub per_anchor: BTreeMap<usize, f64>,
    /// Estimated partition function `Ŵ_i` per prototype present in the batch.
    pub w_hat: BTreeMap<usize, f64>,
}

/// Sample-NCE on precomputed scores `s` (`K × n`).
pub fn sample_nce_scores(tape: &mut Tape, s: Var, batch: &BatchView, weighting: Weighting) -> Result<(Var, NceDiagnostics)> {
    batch.validate()?;
    let (k, n) = (tape.shape(s)[0], tape.shape(s)[1]);
    if n != batch.len() {
        return Err(Error::ShapeMismatch {
            op: "sample_nce",
            left: tape.shape(s).to_vec(),
            right: vec![batch.len()],
        });
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(invalid(format!("label {y} has no prototype ({k} prototypes)")));
    }

    let mut buffered_in_batch: BTreeMap<usize, usize> = BTreeMap::new();
    for (&y, src) in batch.labels.iter().zip(&batch.sources) {
        if matches!(src, SampleSource::Buffered { .. }) {
            *buffered_in_batch.entry(y).or_default() += 1;
        }
    }

    let mut offsets = vec![0.0; k * n];
    if weighting == Weighting::Importance {
        for (col, (&m, src)) in batch.labels.iter().zip(&batch.sources).enumerate() {
            if let SampleSource::Buffered { g } = *src {
                let log_w = -(g * buffered_in_batch[&m] as f64).ln();
                for row in 0..k {
                    if row != m {
                        offsets[row * n + col] = log_w;
                    }
                }
            }
        }
    }
    let mut counts = vec![0.0; k];
    for &y in &batch.labels {
        counts[y] += 1.0;
    }

    let off = tape.constant(Tensor::new(vec![k, n], offsets)?)?;
    let shifted = tape.add(s, off)?;
    let lse = tape.logsumexp_rows(shifted)?;
    let cnt = tape.constant(Tensor::vector(counts.clone())?)?;
    let denom_total = tape.dot(lse, cnt)?;
    let anchors: Vec<(usize, usize)> = batch.labels.iter().enumerate().map(|(j, &y)| (y, j)).collect();
    let pos = tape.gather(s, &anchors)?;
    let pos_total = tape.sum(pos)?;
    let loss = tape.sub(denom_total, pos_total)?;

    let mut diag = NceDiagnostics::default();
    let lse_v = tape.value(lse).data().to_vec();
    let s_v = tape.value(s);
    for (j, &y) in batch.labels.iter().enumerate() {
        *diag.per_anchor.entry(y).or_default() += lse_v[y] - s_v.at(y, j);
        diag.w_hat.insert(y, lse_v[y].exp());
    }
    Ok((loss, diag))
}

/// Sample-NCE on a bound model: embeds the batch, scores at `tau`, evaluates the loss.
pub fn sample_nce_on_tape(tape: &mut Tape, model: &BoundModel, batch: &BatchView, weighting: Weighting) -> Result<(Var, NceDiagnostics)> {
    batch.validate()?;
    let x = tape.constant(batch.inputs.clone())?;
    let z = model.embed(tape, x)?;
    let s = model.scores(tape, z, model.tau())?;
    sample_nce_scores(tape, s, batch, weighting)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleNceOutput {
    pub value: f64,
    pub diagnostics: NceDiagnostics,
}

pub fn sample_nce(state: &ModelState, batch: &BatchView, weighting: Weighting) -> Result<SampleNceOutput> {
    let mut tape = Tape::new();
    let m = state.bind(&mut tape, false)?;
    let (v, diagnostics) = sample_nce_on_tape(&mut tape, &m, batch, weighting)?;
    Ok(SampleNceOutput {
        value: tape.item(v).expect("scalar loss"),
        diagnostics,
    })
}

/// PRD on a tape: `-Σ_j Σ_i q_prev[j, i] · log q_cur[j, i]` where `q_cur` is the
/// per-sample softmax over prototypes of the current scores at `kappa_cur`.
/// `q_prev` (`n × K`) is a constant, so gradients reach only the current model.
pub fn prd_on_tape(tape: &mut Tape, model: &BoundModel, z: Var, q_prev: &Tensor, kappa_cur: f64) -> Result<Var> {
    let s = model.scores(tape, z, kappa_cur)?;
    let (k, n) = (tape.shape(s)[0], tape.shape(s)[1]);
    if q_prev.cols() != k {
        return Err(Error::PrototypeMismatch {
            current: k,
            frozen: q_prev.cols(),
        });
    }
    if q_prev.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "prd",
            left: vec![n, k],
            right: q_prev.shape().to_vec(),
        });
    }
    let st = tape.transpose(s)?;
    let log_q = tape.log_softmax_rows(st)?;
    let target = tape.constant(q_prev.clone())?;
    let cross = tape.dot(target, log_q)?;
    tape.scale(cross, -1.0)
}

fn check_kappas(kappa_cur: f64, kappa_past: f64) -> Result<()> {
    if !(kappa_cur > 0.0) || !(kappa_past > 0.0) {
        return Err(invalid("distillation temperatures must be positive"));
    }
    Ok(())
}

/// Value of the PRD loss over `inputs`.
pub fn prd(state: &ModelState, frozen: &FrozenModel, inputs: &Tensor, kappa_cur: f64, kappa_past: f64) -> Result<f64> {
    check_kappas(kappa_cur, kappa_past)?;
    if state.num_prototypes() != frozen.num_prototypes() {
        return Err(Error::PrototypeMismatch {
            current: state.num_prototypes(),
            frozen: frozen.num_prototypes(),
        });
    }
    let q_prev = frozen.relation_probs(inputs, kappa_past)?;
    let mut tape = Tape::new();
    let m = state.bind(&mut tape, false)?;
    let x = tape.constant(inputs.clone())?;
    let z = m.embed(&mut tape, x)?;
    let l = prd_on_tape(&mut tape, &m, z, &q_prev, kappa_cur)?;
    Ok(tape.item(l).expect("scalar"))
}

/// Σ_j entropy(q_j) over rows of a relation matrix.
pub fn relation_entropy(q: &Tensor) -> f64 {
    q.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Hyper-parameters of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub kappa_cur: f64,
    pub kappa_past: f64,
    pub weighting: Weighting,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            kappa_cur: 0.2,
            kappa_past: 0.1,
            weighting: Weighting::Importance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub sample_nce: f64,
    pub prd: f64,
    pub lambda: f64,
    pub total: f64,
    pub per_anchor: BTreeMap<usize, f64>,
    pub w_hat: BTreeMap<usize, f64>,
}

/// Builds `sample_nce + λ·prd` on `tape`. PRD is skipped when `frozen` is `None`.
pub fn objective_on_tape(
    tape: &mut Tape,
    model: &BoundModel,
    frozen: Option<&FrozenModel>,
    batch: &BatchView,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    if !(cfg.lambda >= 0.0) {
        return Err(invalid(format!("lambda must be non-negative, got {}", cfg.lambda)));
    }
    batch.validate()?;
    let x = tape.constant(batch.inputs.clone())?;
    let z = model.embed(tape, x)?;
    let s = model.scores(tape, z, model.tau())?;
    let (nce, diag) = sample_nce_scores(tape, s, batch, cfg.weighting)?;
    let nce_v = tape.item(nce).expect("scalar");
    let (total, prd_v) = match frozen {
        Some(f) => {
            check_kappas(cfg.kappa_cur, cfg.kappa_past)?;
            let q_prev = f.relation_probs(&batch.inputs, cfg.kappa_past)?;
            let p = prd_on_tape(tape, model, z, &q_prev, cfg.kappa_cur)?;
            let pv = tape.item(p).expect("scalar");
            let wp = tape.scale(p, cfg.lambda)?;
            (tape.add(nce, wp)?, pv)
        }
        None => (nce, 0.0),
    };
    let breakdown = LossBreakdown {
        sample_nce: nce_v,
        prd: prd_v,
        lambda: cfg.lambda,
        total: tape.item(total).expect("scalar"),
        per_anchor: diag.per_anchor,
        w_hat: diag.w_hat,
    };
    Ok((total, breakdown))
}

/// Loss values of the combined objective.
pub fn total_objective(
    state: &ModelState,
    frozen: Option<&FrozenModel>,
    batch: &BatchView,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let m = state.bind(&mut tape, false)?;
    Ok(objective_on_tape(&mut tape, &m, frozen, batch, cfg)?.1)
}

/// Loss values and gradients (in [`ModelState::params`] order) of
/// `scale · (sample_nce + λ·prd)`.
pub fn objective_gradients(
    state: &ModelState,
    frozen: Option<&FrozenModel>,
    batch: &BatchView,
    cfg: &ObjectiveConfig,
    scale: f64,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let m = state.bind(&mut tape, true)?;
    let (total, breakdown) = objective_on_tape(&mut tape, &m, frozen, batch, cfg)?;
    let root = tape.scale(total, scale)?;
    let mut grads = tape.backward(root)?;
    let out = m
        .param_vars()
        .into_iter()
        .map(|v| grads.take(v).expect("leaf gradient"))
        .collect();
    Ok((breakdown, out))
}
