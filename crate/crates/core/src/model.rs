//! Encoder, projection head and prototype layer.
//!
//! Inputs pass through a relu MLP backbone, a two-layer projection head and a
//! unit-normalization layer. Prototype rows are normalized before scoring, so
//! every score `s_ij = ĉ_i · z_j / temperature` lies in `[-1/temperature, 1/temperature]`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::{Tape, Tensor, Var};

/// Guard used when normalizing embeddings on training paths.
pub const EMBED_EPS: f64 = 1e-12;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub projection_hidden: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub proto_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![128, 128],
            projection_hidden: 128,
            embed_dim: 8,
            tau: 0.5,
            proto_init_std: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| invalid(e.to_string()))?;
        let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            weight: Tensor::new(vec![fan_in, fan_out], w)?,
            bias: Tensor::zeros(vec![fan_out])?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Network,
    Prototype,
}

/// Trainable parameters: backbone, projection head, prototypes and temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub encoder: Vec<Linear>,
    pub projection: Vec<Linear>,
    /// `K × embed_dim`, one row per seen class; `None` before the first task.
    pub prototypes: Option<Tensor>,
    pub tau: f64,
}

/// Which representation a downstream probe consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    #[default]
    Projection,
    Backbone,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.embed_dim == 0 || cfg.projection_hidden == 0 {
            return Err(invalid("model dimensions must be positive"));
        }
        if cfg.tau <= 0.0 {
            return Err(invalid("tau must be positive"));
        }
        let mut encoder = Vec::new();
        let mut prev = cfg.input_dim;
        for &h in &cfg.hidden {
            encoder.push(Linear::xavier(prev, h, rng)?);
            prev = h;
        }
        let projection = vec![
            Linear::xavier(prev, cfg.projection_hidden, rng)?,
            Linear::xavier(cfg.projection_hidden, cfg.embed_dim, rng)?,
        ];
        Ok(Self {
            encoder,
            projection,
            prototypes: None,
            tau: cfg.tau,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder
            .first()
            .or(self.projection.first())
            .map(Linear::in_dim)
            .unwrap_or(0)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.last().map(Linear::out_dim).unwrap_or(0)
    }

    pub fn backbone_dim(&self) -> usize {
        self.encoder.last().map(Linear::out_dim).unwrap_or_else(|| self.input_dim())
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.as_ref().map_or(0, Tensor::rows)
    }

    /// Appends `new_classes` prototype rows drawn from `N(0, std²)` and returns them.
    pub fn grow_prototypes(&mut self, new_classes: usize, std: f64, rng: &mut Rng) -> Result<Tensor> {
        if new_classes == 0 {
            return Err(invalid("grow_prototypes needs at least one new class"));
        }
        let d = self.embed_dim();
        let values: Vec<f64> = if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
            (0..new_classes * d).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; new_classes * d]
        };
        let rows = Tensor::new(vec![new_classes, d], values)?;
        self.prototypes = Some(match self.prototypes.take() {
            Some(p) => p.vstack(&rows)?,
            None => rows.clone(),
        });
        Ok(rows)
    }

    /// Parameters in a fixed order: encoder (W, b)…, projection (W, b)…, prototypes.
    pub fn params(&self) -> Vec<(ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.projection) {
            out.push((ParamKind::Network, &l.weight));
            out.push((ParamKind::Network, &l.bias));
        }
        if let Some(p) = &self.prototypes {
            out.push((ParamKind::Prototype, p));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        for l in self.encoder.iter_mut().chain(self.projection.iter_mut()) {
            out.push((ParamKind::Network, &mut l.weight));
            out.push((ParamKind::Network, &mut l.bias));
        }
        if let Some(p) = &mut self.prototypes {
            out.push((ParamKind::Prototype, p));
        }
        out
    }

    /// Registers every parameter on `tape`, as leaves when `trainable`, else as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel> {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let mut encoder = Vec::new();
        for l in &self.encoder {
            encoder.push((put(&l.weight)?, put(&l.bias)?));
        }
        let mut projection = Vec::new();
        for l in &self.projection {
            projection.push((put(&l.weight)?, put(&l.bias)?));
        }
        let prototypes = self.prototypes.as_ref().map(&mut put).transpose()?;
        Ok(BoundModel {
            encoder,
            projection,
            prototypes,
            tau: self.tau,
            input_dim: self.input_dim(),
        })
    }

    /// Unit-norm embeddings of `batch` (`n × input_dim`).
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let z = m.embed(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Backbone features (before the projection head).
    pub fn backbone_features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false)?;
        let x = tape.constant(batch.clone())?;
        let h = m.backbone(&mut tape, x)?;
        Ok(tape.value(h).clone())
    }

    pub fn features(&self, batch: &Tensor, source: FeatureSource) -> Result<Tensor> {
        match source {
            FeatureSource::Projection => self.encode(batch),
            FeatureSource::Backbone => self.backbone_features(batch),
        }
    }

    /// `K × n` scores of unit-norm embeddings `z` against the normalized
    /// prototypes, at temperature `kappa` (or `tau` when `None`).
    pub fn prototype_scores(&self, z: &Tensor, kappa: Option<f64>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let m = self.bind(&mut tape, false)?;
        let zv = tape.constant(z.clone())?;
        let s = m.scores(&mut tape, zv, kappa.unwrap_or(self.tau))?;
        Ok(tape.value(s).clone())
    }

    /// Stable fingerprint of all parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (_, t) in self.params() {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        self.tau.to_bits().hash(&mut h);
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|(_, t)| t.all_finite()) && self.tau.is_finite()
    }

    fn validate(&self) -> Result<()> {
        for (_, t) in self.params() {
            let numel: usize = t.shape().iter().product();
            if numel != t.len() || t.shape().contains(&0) {
                return Err(invalid(format!("corrupt tensor with shape {:?}", t.shape())));
            }
        }
        let mut prev = None;
        for l in self.encoder.iter().chain(&self.projection) {
            if l.bias.len() != l.out_dim() || prev.is_some_and(|p| p != l.in_dim()) {
                return Err(invalid("inconsistent layer dimensions"));
            }
            prev = Some(l.out_dim());
        }
        if self.projection.len() != 2 {
            return Err(invalid("projection head must have two layers"));
        }
        if let Some(p) = &self.prototypes {
            if p.cols() != self.embed_dim() {
                return Err(invalid("prototype width differs from embedding width"));
            }
        }
        if !(self.tau > 0.0) || !self.all_finite() {
            return Err(invalid("non-finite parameters or non-positive tau"));
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let ck = CheckpointRef {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            model: self,
        };
        crate::io::write_atomic(path, &serde_json::to_vec(&ck)?)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported checkpoint schema version {}",
                ck.schema_version
            )));
        }
        ck.model.validate()?;
        Ok(ck.model)
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    schema_version: u32,
    model: &'a ModelState,
}

#[derive(Deserialize)]
struct Checkpoint {
    schema_version: u32,
    model: ModelState,
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    encoder: Vec<(Var, Var)>,
    projection: Vec<(Var, Var)>,
    prototypes: Option<Var>,
    tau: f64,
    input_dim: usize,
}

impl BoundModel {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Vars in the same order as [`ModelState::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .encoder
            .iter()
            .chain(&self.projection)
            .flat_map(|&(w, b)| [w, b])
            .collect();
        out.extend(self.prototypes);
        out
    }

    pub fn prototypes(&self) -> Option<Var> {
        self.prototypes
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: shape.to_vec(),
                right: vec![self.input_dim],
            });
        }
        Ok(())
    }

    pub fn backbone(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let mut h = x;
        for &(w, b) in &self.encoder {
            let a = tape.matmul(h, w)?;
            let a = tape.add_row(a, b)?;
            h = tape.relu(a)?;
        }
        Ok(h)
    }

    /// Unit-norm projection embeddings, `n × embed_dim`.
    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = self.backbone(tape, x)?;
        for (i, &(w, b)) in self.projection.iter().enumerate() {
            let a = tape.matmul(h, w)?;
            h = tape.add_row(a, b)?;
            if i + 1 < self.projection.len() {
                h = tape.relu(h)?;
            }
        }
        tape.l2_normalize_rows_eps(h, EMBED_EPS)
    }

    /// `K × n` prototype scores at `temperature`.
    pub fn scores(&self, tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        let c = self.prototypes.ok_or_else(|| invalid("model has no prototypes"))?;
        let cn = tape.l2_normalize_rows(c)?;
        let zt = tape.transpose(z)?;
        let s = tape.matmul(cn, zt)?;
        tape.scale(s, 1.0 / temperature)
    }
}

/// Read-only snapshot of a [`ModelState`], cheap to clone and share.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    inner: Arc<ModelState>,
}

impl FrozenModel {
    pub fn snapshot(state: &ModelState) -> Self {
        Self {
            inner: Arc::new(state.clone()),
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.inner
    }

    pub fn num_prototypes(&self) -> usize {
        self.inner.num_prototypes()
    }

    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        self.inner.encode(batch)
    }

    pub fn prototype_scores(&self, z: &Tensor, kappa: Option<f64>) -> Result<Tensor> {
        self.inner.prototype_scores(z, kappa)
    }

    /// `n × K` prototype-instance relation: per sample, softmax over prototypes
    /// of the scores at temperature `kappa`.
    pub fn relation_probs(&self, inputs: &Tensor, kappa: f64) -> Result<Tensor> {
        relation_probs(&self.inner, inputs, kappa)
    }

    /// New snapshot whose prototype matrix has `rows` appended.
    pub fn extend_prototypes(&self, rows: &Tensor) -> Result<Self> {
        let mut s = (*self.inner).clone();
        s.prototypes = Some(match s.prototypes.take() {
            Some(p) => p.vstack(rows)?,
            None => rows.clone(),
        });
        Ok(Self { inner: Arc::new(s) })
    }
}

pub(crate) fn relation_probs(state: &ModelState, inputs: &Tensor, kappa: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let m = state.bind(&mut tape, false)?;
    let x = tape.constant(inputs.clone())?;
    let z = m.embed(&mut tape, x)?;
    let s = m.scores(&mut tape, z, kappa)?;
    let st = tape.transpose(s)?;
    let q = tape.softmax_rows(st)?;
    Ok(tape.value(q).clone())
}

/// Random prototype initialisation helper for tests and tools.
pub fn random_unit_rows(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.iter().map(|v| v / n));
    }
    Tensor::new(vec![rows, cols], data)
}
