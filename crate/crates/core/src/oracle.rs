//! Brute-force references: full-data loss and gradient, classical and
//! self-normalized importance sampling, a simplex KL minimizer and a
//! Monte-Carlo study of the importance-sampled gradient estimator.

use std::collections::BTreeMap;

use rand::distr::Distribution as _;
use rand::Rng as _;
use rand::distr::weighted::WeightedIndex;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, ModelState, EMBED_EPS};
use crate::rng::{stream, Rng};
use crate::tasks::{stack_features, Sample};
use crate::{Tape, Tensor};

fn unit(v: &[f64], eps: f64) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
    v.iter().map(|x| x / n).collect()
}

/// Scores `s[i][k]` of every prototype against every sample, by plain loops.
pub fn naive_scores(state: &ModelState, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let protos = state.prototypes.as_ref().ok_or_else(|| invalid("model has no prototypes"))?;
    let z = state.encode(&stack_features(samples)?)?;
    let mut s = Vec::with_capacity(protos.rows());
    for i in 0..protos.rows() {
        let c = protos.row(i);
        if c.iter().all(|v| *v == 0.0) {
            return Err(Error::ZeroNorm { row: i });
        }
        let c = unit(c, 0.0);
        let zs: Vec<f64> = (0..z.rows())
            .map(|k| {
                let zk = unit(z.row(k), EMBED_EPS);
                c.iter().zip(&zk).map(|(a, b)| a * b).sum::<f64>() / state.tau
            })
            .collect();
        s.push(zs);
    }
    Ok(s)
}

/// `Σ_i Σ_{j ∈ S_i} −log(exp s_ij / Σ_k exp s_ik)` over the complete data.
pub fn full_loss(state: &ModelState, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = naive_scores(state, samples)?;
    let mut total = 0.0;
    for (j, smp) in samples.iter().enumerate() {
        let row = s.get(smp.label).ok_or_else(|| invalid(format!("no prototype for class {}", smp.label)))?;
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[j];
    }
    Ok(total)
}

/// Full-data loss built on a tape from `exp`, row sums and `log`.
pub fn full_loss_on_tape(tape: &mut Tape, state: &ModelState, samples: &[Sample], trainable: bool) -> Result<(crate::Var, Vec<crate::Var>)> {
    let m = state.bind(tape, trainable)?;
    let x = tape.constant(stack_features(samples)?)?;
    let z = m.embed(tape, x)?;
    let s = m.scores(tape, z, m.tau())?;
    let (k, n) = (tape.shape(s)[0], tape.shape(s)[1]);
    let e = tape.exp(s)?;
    let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0)?)?;
    let w = tape.matmul(e, ones)?;
    let lw = tape.log(w)?;
    let mut counts = vec![0.0; k];
    for smp in samples {
        if smp.label >= k {
            return Err(invalid(format!("no prototype for class {}", smp.label)));
        }
        counts[smp.label] += 1.0;
    }
    let cnt = tape.constant(Tensor::new(vec![k, 1], counts)?)?;
    let weighted = tape.mul(lw, cnt)?;
    let part = tape.sum(weighted)?;
    let pos_idx: Vec<(usize, usize)> = samples.iter().enumerate().map(|(j, s)| (s.label, j)).collect();
    let pos = tape.gather(s, &pos_idx)?;
    let pos = tape.sum(pos)?;
    Ok((tape.sub(part, pos)?, m.param_vars()))
}

/// Exact gradient of [`full_loss`] in [`ModelState::params`] order.
pub fn full_gradient(state: &ModelState, samples: &[Sample]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let (root, vars) = full_loss_on_tape(&mut tape, state, samples, true)?;
    let mut g = tape.backward(root)?;
    Ok(vars.into_iter().map(|v| g.take(v).expect("leaf gradient")).collect())
}

/// Discrete importance-sampling instance on support `0..n`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsInstance {
    /// Target weights; normalized unless `z_pi` is given.
    pub pi: Vec<f64>,
    pub q: Vec<f64>,
    pub f: Vec<f64>,
    pub z_pi: Option<f64>,
}

impl IsInstance {
    fn check(&self) -> Result<()> {
        let n = self.pi.len();
        if n == 0 || self.q.len() != n || self.f.len() != n {
            return Err(invalid("pi, q and f must share a nonempty support"));
        }
        if self.pi.iter().chain(&self.q).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("weights must be finite and non-negative"));
        }
        if let Some(k) = (0..n).find(|&k| self.pi[k] > 0.0 && self.q[k] == 0.0) {
            return Err(invalid(format!("proposal is zero at support point {k} where the target is positive")));
        }
        Ok(())
    }

    /// `Σ π f / Σ π`.
    pub fn exact(&self) -> f64 {
        let z: f64 = self.pi.iter().sum();
        self.pi.iter().zip(&self.f).map(|(p, f)| p * f).sum::<f64>() / z
    }

    fn draws(&self, l: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        let w = WeightedIndex::new(&self.q).map_err(|e| invalid(e.to_string()))?;
        Ok((0..l).map(|_| w.sample(rng)).collect())
    }

    fn q_norm(&self) -> f64 {
        self.q.iter().sum()
    }
}

/// `(1/L) Σ π(z)/q(z) · f(z)`, `z ~ q`. `π` is divided by `z_pi` when given.
pub fn classical_is(inst: &IsInstance, draws: usize, rng: &mut Rng) -> Result<f64> {
    inst.check()?;
    if draws == 0 {
        return Err(invalid("need at least one draw"));
    }
    let z = match inst.z_pi {
        Some(z) => z,
        None => {
            let s: f64 = inst.pi.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid("classical importance sampling needs a normalized target"));
            }
            1.0
        }
    };
    let qn = inst.q_norm();
    let idx = inst.draws(draws, rng)?;
    Ok(idx.iter().map(|&k| inst.pi[k] / z / (inst.q[k] / qn) * inst.f[k]).sum::<f64>() / draws as f64)
}

/// Self-normalized estimate `Σ (π̂/q) f / Σ (π̂/q)`.
pub fn biased_is(inst: &IsInstance, draws: usize, rng: &mut Rng) -> Result<f64> {
    inst.check()?;
    if draws == 0 {
        return Err(invalid("need at least one draw"));
    }
    let idx = inst.draws(draws, rng)?;
    let (mut num, mut den) = (0.0, 0.0);
    for &k in &idx {
        let w = inst.pi[k] / inst.q[k];
        num += w * inst.f[k];
        den += w;
    }
    if den == 0.0 {
        return Err(invalid("all importance weights are zero"));
    }
    Ok(num / den)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let t = (css - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// `(1/n) Σ_i KL(p_i ‖ g)`; infinite if `g` misses mass of some `p_i`.
pub fn mean_kl(targets: &[Vec<f64>], g: &[f64]) -> f64 {
    let n = targets.len() as f64;
    targets
        .iter()
        .map(|p| {
            p.iter()
                .zip(g)
                .filter(|(pk, _)| **pk > 0.0)
                .map(|(&pk, &gk)| if gk > 0.0 { pk * (pk / gk).ln() } else { f64::INFINITY })
                .sum::<f64>()
        })
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct KlMinimum {
    pub g: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `‖g − Π(g − ∇F(g))‖₂` at exit.
    pub gradient_mapping_norm: f64,
}

pub const KL_MAX_ITERS: usize = 10_000;
pub const KL_INITIAL_STEP: f64 = 1.0;

/// Minimizes the mean KL divergence from `targets` over the simplex by
/// exponentiated-gradient steps `g ∝ g·exp(−t∇F)`. The step starts at 1,
/// is halved until the objective decreases enough and doubled after success.
pub fn simplex_minimize_kl(targets: &[Vec<f64>]) -> Result<KlMinimum> {
    let Some(first) = targets.first() else {
        return Err(invalid("no target distributions"));
    };
    let d = first.len();
    if d < 2 {
        return Err(invalid("support size must be at least 2"));
    }
    for p in targets {
        if p.len() != d {
            return Err(invalid("targets differ in support size"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0) {
            return Err(invalid("targets must be normalized distributions"));
        }
    }
    let n = targets.len() as f64;
    let pbar: Vec<f64> = (0..d).map(|k| targets.iter().map(|p| p[k]).sum::<f64>() / n).collect();
    let grad = |g: &[f64]| -> Vec<f64> { pbar.iter().zip(g).map(|(p, gk)| if *p > 0.0 { -p / gk } else { 0.0 }).collect() };
    let mapping = |g: &[f64], gr: &[f64]| -> f64 {
        let step: Vec<f64> = g.iter().zip(gr).map(|(a, b)| a - b).collect();
        project_simplex(&step).iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut g = vec![1.0 / d as f64; d];
    let mut f = mean_kl(targets, &g);
    let mut gr = grad(&g);
    let mut step = KL_INITIAL_STEP;
    let mut iterations = 0;
    let mut norm = mapping(&g, &gr);
    while iterations < KL_MAX_ITERS && norm > 1e-13 {
        iterations += 1;
        let lo = gr.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut t = step;
        let accepted = loop {
            let mut cand: Vec<f64> = g.iter().zip(&gr).map(|(gk, d)| gk * (-t * (d - lo)).exp()).collect();
            let z: f64 = cand.iter().sum();
            cand.iter_mut().for_each(|c| *c /= z);
            let fc = mean_kl(targets, &cand);
            let decrease: f64 = gr.iter().zip(cand.iter().zip(&g)).map(|(gk, (c, o))| gk * (c - o)).sum();
            if fc.is_finite() && fc <= f + 1e-4 * decrease {
                break Some((cand, fc));
            }
            t *= 0.5;
            if t < 1e-20 {
                break None;
            }
        };
        let Some((g_new, f_new)) = accepted else { break };
        step = (2.0 * t).min(1e6);
        g = g_new;
        f = f_new;
        gr = grad(&g);
        norm = mapping(&g, &gr);
    }
    if norm > 1e-6 {
        return Err(Error::NoConvergence(format!(
            "projected-gradient mapping norm {norm:e} after {iterations} iterations"
        )));
    }
    let objective = mean_kl(targets, &g);
    Ok(KlMinimum {
        g,
        objective,
        iterations,
        gradient_mapping_norm: norm,
    })
}

/// One-sided sign-test p-value: `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p_value(wins: u64, n: u64) -> Result<f64> {
    if wins > n {
        return Err(invalid("more wins than trials"));
    }
    if wins == 0 {
        return Ok(1.0);
    }
    let b = Binomial::new(0.5, n).map_err(|e| invalid(e.to_string()))?;
    Ok(1.0 - b.cdf(wins - 1))
}

/// Proposal used for every sampled class in a study row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Uniform,
    /// Mean of the other prototypes' within-class targets.
    TargetMean,
    /// `∝ 1 − p̄`, a deliberately poor control.
    Adversarial,
    /// Whole class retained with `g = 1/|S_m|` (no sampling).
    FullRetention,
}

impl ProposalKind {
    pub fn name(self) -> &'static str {
        match self {
            ProposalKind::Uniform => "uniform",
            ProposalKind::TargetMean => "target_mean",
            ProposalKind::Adversarial => "adversarial",
            ProposalKind::FullRetention => "full_retention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MseStudyConfig {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Low temperatures make within-class targets skewed.
    pub tau: f64,
    pub input_spread: f64,
    pub jm_grid: Vec<usize>,
    pub replications: usize,
    /// Batch factor of the alternative bound.
    pub batch: usize,
    pub proposals: Vec<ProposalKind>,
    pub seed: u64,
}

impl Default for MseStudyConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 12,
            input_dim: 4,
            hidden: 8,
            embed_dim: 4,
            tau: 0.2,
            input_spread: 2.0,
            jm_grid: vec![2, 4, 8, 16],
            replications: 200,
            batch: 12,
            proposals: vec![ProposalKind::Uniform, ProposalKind::TargetMean, ProposalKind::Adversarial],
            seed: 0,
        }
    }
}

impl MseStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.per_class < 2 {
            return Err(invalid("a study needs at least 2 classes of at least 2 samples"));
        }
        if self.replications < 2 || self.jm_grid.is_empty() || self.jm_grid.contains(&0) {
            return Err(invalid("replications must be at least 2 and |J_m| values positive"));
        }
        if !(self.tau > 0.0) || !(self.input_spread > 0.0) {
            return Err(invalid("tau and input_spread must be positive"));
        }
        Ok(())
    }
}

/// Scores and per-pair score gradients of one small random instance.
#[derive(Clone, Debug)]
pub struct StudyInstance {
    /// `scores[i][k]`
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `grads[i][k]` = flattened `∇θ s_ik`.
    pub grads: Vec<Vec<Vec<f64>>>,
    /// Largest observed `‖∇θ s_ik‖₂`.
    pub m_bound: f64,
}

impl StudyInstance {
    pub fn classes(&self) -> usize {
        self.scores.len()
    }

    pub fn members(&self, m: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&k| self.labels[k] == m).collect()
    }

    /// Within-class softmax of prototype `i` over class `m`.
    pub fn within_class_target(&self, i: usize, m: usize) -> Vec<f64> {
        let idx = self.members(m);
        let row = &self.scores[i];
        let mx = idx.iter().map(|&k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = idx.iter().map(|&k| (row[k] - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Softmax-weighted gradient `Σ_k p_ik ∇s_ik` over the complete data.
    pub fn true_mu(&self, i: usize) -> Vec<f64> {
        let row = &self.scores[i];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let dim = self.grads[i][0].len();
        let mut mu = vec![0.0; dim];
        for (k, ek) in e.iter().enumerate() {
            for (a, h) in mu.iter_mut().zip(&self.grads[i][k]) {
                *a += ek / z * h;
            }
        }
        mu
    }

    /// Proposal over each class's members (class-id keyed).
    pub fn proposal(&self, kind: ProposalKind) -> BTreeMap<usize, Vec<f64>> {
        (0..self.classes())
            .map(|m| {
                let n = self.members(m).len();
                let target_mean = || {
                    let mut g = vec![0.0; n];
                    let others: Vec<usize> = (0..self.classes()).filter(|&i| i != m).collect();
                    for &i in &others {
                        for (a, p) in g.iter_mut().zip(self.within_class_target(i, m)) {
                            *a += p / others.len() as f64;
                        }
                    }
                    g
                };
                let g = match kind {
                    ProposalKind::Uniform | ProposalKind::FullRetention => vec![1.0 / n as f64; n],
                    ProposalKind::TargetMean => target_mean(),
                    ProposalKind::Adversarial => {
                        let inv: Vec<f64> = target_mean().iter().map(|p| (1.0 - p).max(1e-12)).collect();
                        let s: f64 = inv.iter().sum();
                        inv.into_iter().map(|v| v / s).collect()
                    }
                };
                (m, g)
            })
            .collect()
    }

    /// Importance-sampled estimate of [`Self::true_mu`] for anchor `i`
    /// given the retained indices and proposal of every other class.
    pub fn estimate_mu(&self, i: usize, retained: &BTreeMap<usize, Vec<usize>>, g: &BTreeMap<usize, Vec<f64>>) -> Vec<f64> {
        let row = &self.scores[i];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dim = self.grads[i][0].len();
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        let add = |k: usize, w: f64, num: &mut Vec<f64>| {
            for (a, h) in num.iter_mut().zip(&self.grads[i][k]) {
                *a += w * h;
            }
        };
        for k in self.members(i) {
            let w = (row[k] - mx).exp();
            add(k, w, &mut num);
            den += w;
        }
        for m in (0..self.classes()).filter(|&m| m != i) {
            let members = self.members(m);
            let picks = &retained[&m];
            for &p in picks {
                let k = members[p];
                let w = (row[k] - mx).exp() / (g[&m][p] * picks.len() as f64);
                add(k, w, &mut num);
                den += w;
            }
        }
        num.into_iter().map(|v| v / den).collect()
    }
}

/// Builds a random small network and data set and records every score
/// gradient with the tape.
pub fn build_study_instance(cfg: &MseStudyConfig, seed: u64) -> Result<StudyInstance> {
    cfg.validate()?;
    let mut rng = stream(seed, 11);
    let mcfg = ModelConfig {
        input_dim: cfg.input_dim,
        hidden: vec![cfg.hidden],
        projection_hidden: cfg.hidden,
        embed_dim: cfg.embed_dim,
        tau: cfg.tau,
        proto_init_std: 1.0,
    };
    let mut state = ModelState::new(&mcfg, &mut rng)?;
    state.grow_prototypes(cfg.classes, 1.0, &mut rng)?;
    let normal = Normal::new(0.0, cfg.input_spread).map_err(|e| invalid(e.to_string()))?;
    let n = cfg.classes * cfg.per_class;
    let x = Tensor::new(vec![n, cfg.input_dim], (0..n * cfg.input_dim).map(|_| normal.sample(&mut rng)).collect())?;
    let labels: Vec<usize> = (0..n).map(|k| k / cfg.per_class).collect();
    let scores_t = state.prototype_scores(&state.encode(&x)?, None)?;
    let scores: Vec<Vec<f64>> = (0..cfg.classes).map(|i| scores_t.row(i).to_vec()).collect();
    let mut grads = vec![Vec::with_capacity(n); cfg.classes];
    let mut m_bound: f64 = 0.0;
    for k in 0..n {
        for (i, gi) in grads.iter_mut().enumerate() {
            let mut tape = Tape::new();
            let bm = state.bind(&mut tape, true)?;
            let xk = tape.constant(x.select_rows(&[k])?)?;
            let z = bm.embed(&mut tape, xk)?;
            let s = bm.scores(&mut tape, z, bm.tau())?;
            let sik = tape.gather(s, &[(i, 0)])?;
            let root = tape.sum(sik)?;
            let mut g = tape.backward(root)?;
            let flat: Vec<f64> = bm
                .param_vars()
                .into_iter()
                .flat_map(|v| g.take(v).expect("leaf gradient").into_data())
                .collect();
            m_bound = m_bound.max(flat.iter().map(|v| v * v).sum::<f64>().sqrt());
            gi.push(flat);
        }
    }
    Ok(StudyInstance {
        scores,
        labels,
        grads,
        m_bound,
    })
}

/// One study row: a proposal kind at one `|J_m|`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub proposal_kind: ProposalKind,
    pub jm: usize,
    pub replications: usize,
    /// Empirical `E‖μ̂ − μ‖²`, averaged over anchors.
    pub mse: f64,
    /// Standard error of `mse`.
    pub mse_se: f64,
    /// Mean over (anchor, class) pairs of `var_g(p̃/g)`.
    pub var_weight: f64,
    /// Mean over anchors of `Σ_m M²/|J_m| (1 + var)`.
    pub mse_bound: f64,
    /// The same bound scaled by `B²`.
    pub bound_b2: f64,
    pub m_bound: f64,
    /// Largest class mass `ρ_i^{(m)}` over (anchor, class) pairs.
    pub rho_max: f64,
    pub seed: u64,
}

fn weight_variance(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(p, g)| p * p / g).sum::<f64>() - 1.0
}

/// MSE of the estimator for one proposal and `|J_m|`, averaged over anchors.
/// Retained sets are drawn with replacement from `g`, shared by all anchors
/// within a replication.
pub fn estimator_mse(
    inst: &StudyInstance,
    kind: ProposalKind,
    jm: usize,
    replications: usize,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let g = inst.proposal(kind);
    let k = inst.classes();
    let truths: Vec<Vec<f64>> = (0..k).map(|i| inst.true_mu(i)).collect();
    let sq_err = |retained: &BTreeMap<usize, Vec<usize>>| -> f64 {
        (0..k)
            .map(|i| {
                inst.estimate_mu(i, retained, &g)
                    .iter()
                    .zip(&truths[i])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / k as f64
    };
    if kind == ProposalKind::FullRetention {
        let retained = (0..k).map(|m| (m, (0..inst.members(m).len()).collect())).collect();
        return Ok((sq_err(&retained), 0.0));
    }
    let samplers: Vec<WeightedIndex<f64>> = (0..k)
        .map(|m| WeightedIndex::new(&g[&m]).map_err(|e| invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let errs: Vec<f64> = (0..replications)
        .map(|_| {
            let retained = (0..k)
                .map(|m| (m, (0..jm).map(|_| samplers[m].sample(rng)).collect()))
                .collect();
            sq_err(&retained)
        })
        .collect();
    let r = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / r;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (r - 1.0);
    Ok((mean, (var / r).sqrt()))
}

/// Rows for every configured proposal and `|J_m|` on one instance.
pub fn mse_study_instance(inst: &StudyInstance, cfg: &MseStudyConfig, seed: u64) -> Result<Vec<StudyRow>> {
    let k = inst.classes();
    let m2 = inst.m_bound * inst.m_bound;
    let mut rows = Vec::new();
    for &kind in &cfg.proposals {
        let g = inst.proposal(kind);
        let mut vars = Vec::new();
        let mut rho_max: f64 = 0.0;
        let mut per_anchor_sum = vec![0.0; k];
        for i in 0..k {
            let row = &inst.scores[i];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for m in (0..k).filter(|&m| m != i) {
                let v = weight_variance(&inst.within_class_target(i, m), &g[&m]);
                vars.push(v);
                per_anchor_sum[i] += 1.0 + v;
                let rho: f64 = inst.members(m).iter().map(|&j| (row[j] - mx).exp()).sum::<f64>() / z;
                rho_max = rho_max.max(rho);
            }
        }
        let var_weight = vars.iter().sum::<f64>() / vars.len() as f64;
        let grid: Vec<usize> = if kind == ProposalKind::FullRetention { vec![cfg.per_class] } else { cfg.jm_grid.clone() };
        for (gi, &jm) in grid.iter().enumerate() {
            let mut rng = stream(seed, 1000 + 100 * kind as u64 + gi as u64);
            let (mse, mse_se) = estimator_mse(inst, kind, jm, cfg.replications, &mut rng)?;
            let bound = per_anchor_sum.iter().map(|s| m2 / jm as f64 * s).sum::<f64>() / k as f64;
            let b2 = (cfg.batch * cfg.batch) as f64;
            if kind != ProposalKind::FullRetention && mse > bound + 2.0 * mse_se {
                log::warn!("{} |J_m|={jm}: empirical MSE {mse:e} above the bound {bound:e}", kind.name());
            }
            if mse > 0.0 && bound > 10.0 * mse {
                log::debug!("{} |J_m|={jm}: bound is {:.1}x the empirical MSE", kind.name(), bound / mse);
            }
            rows.push(StudyRow {
                proposal_kind: kind,
                jm,
                replications: if kind == ProposalKind::FullRetention { 1 } else { cfg.replications },
                mse,
                mse_se,
                var_weight,
                mse_bound: bound,
                bound_b2: bound * b2,
                m_bound: inst.m_bound,
                rho_max,
                seed,
            });
        }
    }
    Ok(rows)
}

/// Builds the instance for `cfg.seed` and runs every row.
pub fn mse_study(cfg: &MseStudyConfig) -> Result<Vec<StudyRow>> {
    let inst = build_study_instance(cfg, cfg.seed)?;
    mse_study_instance(&inst, cfg, cfg.seed)
}

/// Paired comparison of two proposals over many seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedComparison {
    pub seeds: u64,
    /// Seeds on which the first proposal's MSE is ≤ the second's.
    pub wins: u64,
    pub p_value: f64,
}

pub fn compare_proposals(cfg: &MseStudyConfig, a: ProposalKind, b: ProposalKind, jm: usize, seeds: u64) -> Result<PairedComparison> {
    let mut wins = 0;
    for s in 0..seeds {
        let seed = cfg.seed + s;
        let inst = build_study_instance(cfg, seed)?;
        let (ma, _) = estimator_mse(&inst, a, jm, cfg.replications, &mut stream(seed, 21))?;
        let (mb, _) = estimator_mse(&inst, b, jm, cfg.replications, &mut stream(seed, 22))?;
        if ma <= mb {
            wins += 1;
        }
    }
    Ok(PairedComparison {
        seeds,
        wins,
        p_value: sign_test_p_value(wins, seeds)?,
    })
}

/// Study CSV with a header row.
pub fn study_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from("proposal_kind,jm,replications,mse,var_weight,theorem1_bound,m_bound,seed,bound_b2,rho_max,mse_se\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{:e},{},{:e},{:e},{:e}\n",
            r.proposal_kind.name(),
            r.jm,
            r.replications,
            r.mse,
            r.var_weight,
            r.mse_bound,
            r.m_bound,
            r.seed,
            r.bound_b2,
            r.rho_max,
            r.mse_se
        ));
    }
    out
}

/// Exact inclusion probabilities of successive weighted draws without
/// replacement, by enumerating every ordered sequence of `take` draws.
pub fn inclusion_probabilities(weights: &[f64], take: usize) -> Result<Vec<f64>> {
    if take > weights.len() || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(invalid("need positive finite weights and take ≤ support size"));
    }
    fn walk(w: &[f64], left: usize, used: &mut [bool], prob: f64, out: &mut [f64]) {
        if left == 0 {
            return;
        }
        let rest: f64 = w.iter().zip(used.iter()).filter(|(_, u)| !**u).map(|(w, _)| w).sum();
        for k in 0..w.len() {
            if used[k] {
                continue;
            }
            let p = prob * w[k] / rest;
            out[k] += p;
            used[k] = true;
            walk(w, left - 1, used, p, out);
            used[k] = false;
        }
    }
    let mut out = vec![0.0; weights.len()];
    walk(weights, take, &mut vec![false; weights.len()], 1.0, &mut out);
    Ok(out)
}

/// Uniform random point of the simplex (normalized exponentials).
pub fn random_simplex_point(d: usize, rng: &mut Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..d).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn toy_samples() -> Vec<Sample> {
        let mut rng = seeded(7);
        (0..6)
            .map(|k| Sample {
                id: k,
                label: k % 2,
                task: 0,
                features: (0..3).map(|_| rng.random::<f64>() - 0.5).collect(),
            })
            .collect()
    }

    fn toy_state(classes: usize) -> ModelState {
        let mut rng = seeded(3);
        let mut s = ModelState::new(
            &ModelConfig {
                input_dim: 3,
                hidden: vec![5],
                projection_hidden: 4,
                embed_dim: 3,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        s.grow_prototypes(classes, 0.5, &mut rng).unwrap();
        s
    }

    #[test]
    fn singleton_loss_is_zero() {
        let st = toy_state(1);
        let s = vec![Sample { id: 0, label: 0, task: 0, features: vec![0.1, 0.2, 0.3] }];
        assert!(full_loss(&st, &s).unwrap().abs() < 1e-15);
    }

    #[test]
    fn tape_and_loop_losses_agree() {
        let st = toy_state(2);
        let s = toy_samples();
        let mut tape = Tape::new();
        let (root, _) = full_loss_on_tape(&mut tape, &st, &s, false).unwrap();
        assert!((tape.item(root).unwrap() - full_loss(&st, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let st = toy_state(2);
        let s = toy_samples();
        let g = full_gradient(&st, &s).unwrap();
        let h = 1e-6;
        for (p, gp) in g.iter().enumerate() {
            for k in (0..gp.len()).step_by(3) {
                let mut a = st.clone();
                let mut b = st.clone();
                a.params_mut()[p].1.data_mut()[k] += h;
                b.params_mut()[p].1.data_mut()[k] -= h;
                let fd = (full_loss(&a, &s).unwrap() - full_loss(&b, &s).unwrap()) / (2.0 * h);
                assert!((fd - gp.data()[k]).abs() < 1e-6 * gp.data()[k].abs().max(1.0), "{p},{k}");
            }
        }
    }

    #[test]
    fn one_parameter_toy_optimum_has_zero_gradient() {
        // loss(a) = -log softmax of s = [-(a-1.3)^2, 0] at the first entry
        let loss = |t: &mut Tape, a: crate::Var| -> Result<crate::Var> {
            let c = t.constant(Tensor::vector(vec![1.3]).unwrap())?;
            let d = t.sub(a, c)?;
            let sq = t.mul(d, d)?;
            let s0 = t.scale(sq, -1.0)?;
            let zero = t.constant(Tensor::vector(vec![0.0]).unwrap())?;
            let e0 = t.exp(s0)?;
            let e1 = t.exp(zero)?;
            let den = t.add(e0, e1)?;
            let l = t.log(den)?;
            let out = t.sub(l, s0)?;
            t.sum(out)
        };
        let value = |a: f64| {
            let mut t = Tape::new();
            let v = t.constant(Tensor::vector(vec![a]).unwrap()).unwrap();
            let r = loss(&mut t, v).unwrap();
            t.item(r).unwrap()
        };
        let (mut lo, mut hi) = (-5.0f64, 5.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let (x1, x2) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
            if value(x1) < value(x2) {
                hi = x2;
            } else {
                lo = x1;
            }
        }
        let a = 0.5 * (lo + hi);
        let mut t = Tape::new();
        let v = t.leaf(Tensor::vector(vec![a]).unwrap()).unwrap();
        let r = loss(&mut t, v).unwrap();
        let g = t.backward(r).unwrap();
        assert!(g.get(v).unwrap().data()[0].abs() < 1e-6);
    }

    #[test]
    fn classical_is_with_q_equal_pi_is_sample_mean() {
        let inst = IsInstance { pi: vec![0.5, 0.5], q: vec![0.5, 0.5], f: vec![2.0, 2.0], z_pi: None };
        assert_eq!(classical_is(&inst, 10, &mut seeded(0)).unwrap(), 2.0);
    }

    #[test]
    fn support_violation_is_an_error() {
        let inst = IsInstance { pi: vec![0.5, 0.5], q: vec![1.0, 0.0], f: vec![1.0, 1.0], z_pi: None };
        assert!(classical_is(&inst, 10, &mut seeded(0)).is_err());
        assert!(biased_is(&inst, 10, &mut seeded(0)).is_err());
    }

    #[test]
    fn biased_is_exact_when_q_proportional() {
        let inst = IsInstance { pi: vec![2.0, 6.0, 2.0], q: vec![0.2, 0.6, 0.2], f: vec![1.0, 5.0, -3.0], z_pi: None };
        let e = biased_is(&inst, 20_000, &mut seeded(1)).unwrap();
        assert!((e - inst.exact()).abs() < 0.1, "{e}");
        let single = IsInstance { pi: vec![3.0], q: vec![1.0], f: vec![4.5], z_pi: None };
        assert_eq!(biased_is(&single, 5, &mut seeded(2)).unwrap(), 4.5);
    }

    #[test]
    fn all_zero_weights_error() {
        let inst = IsInstance { pi: vec![0.0, 0.0], q: vec![0.5, 0.5], f: vec![1.0, 1.0], z_pi: None };
        assert!(biased_is(&inst, 5, &mut seeded(0)).is_err());
    }

    #[test]
    fn simplex_projection_properties() {
        let p = project_simplex(&[0.3, 1.2, -0.4]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
        assert_eq!(project_simplex(&[0.2, 0.8]), vec![0.2, 0.8]);
    }

    #[test]
    fn kl_minimizer_examples() {
        let one = simplex_minimize_kl(&[vec![0.7, 0.2, 0.1]]).unwrap();
        assert!(one.objective.abs() < 1e-12);
        let two = simplex_minimize_kl(&[vec![0.8, 0.2], vec![0.4, 0.6]]).unwrap();
        assert!((two.g[0] - 0.6).abs() < 1e-6 && (two.g[1] - 0.4).abs() < 1e-6);
        assert!(simplex_minimize_kl(&[vec![1.0]]).is_err());
    }

    #[test]
    fn inclusion_of_two_from_three_equal() {
        let p = inclusion_probabilities(&[1.0, 1.0, 1.0], 2).unwrap();
        assert!(p.iter().all(|v| (v - 2.0 / 3.0).abs() < 1e-15));
        let q = inclusion_probabilities(&[0.4, 0.3, 0.2, 0.1], 2).unwrap();
        assert!((q.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p_value(10, 10).unwrap() - 0.5f64.powi(10)).abs() < 1e-15);
        assert_eq!(sign_test_p_value(0, 10).unwrap(), 1.0);
        assert!((sign_test_p_value(1, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn full_retention_is_exact() {
        let cfg = MseStudyConfig { classes: 3, per_class: 4, replications: 2, ..Default::default() };
        let inst = build_study_instance(&cfg, 0).unwrap();
        let (mse, _) = estimator_mse(&inst, ProposalKind::FullRetention, 4, 1, &mut seeded(0)).unwrap();
        assert!(mse < 1e-20, "{mse}");
    }
}
