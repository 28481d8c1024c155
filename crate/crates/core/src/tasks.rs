//! Sequential task streams, the raw image container format and augmentation.
//!
//! Class ids are dense and assigned in task order (task 0 owns the first
//! `|Y_0|` ids, and so on), so a class id doubles as its prototype row.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{seeded, Rng};
use crate::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Unique across the whole stream, train and test.
    pub id: usize,
    pub label: usize,
    /// Index of the task that introduced this sample.
    pub task: usize,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub input_dim: usize,
    pub total_classes: usize,
    /// Original label of each dense class id (identity for synthetic streams).
    pub source_labels: Vec<u32>,
}

impl TaskStream {
    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }

    /// Classes introduced up to and including task `t`.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Standard deviation of all training feature values.
    pub fn feature_std(&self) -> f64 {
        let vals: Vec<f64> = self
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().flat_map(|s| s.features.iter().copied()))
            .collect();
        if vals.is_empty() {
            return 0.0;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        let mut ids = std::collections::HashSet::new();
        for t in &self.tasks {
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(invalid(format!("class {c} appears in more than one task")));
                }
            }
            for s in t.train.iter().chain(&t.test) {
                if !t.classes.contains(&s.label) {
                    return Err(invalid(format!("sample {} has label outside its task", s.id)));
                }
                if !ids.insert(s.id) {
                    return Err(invalid(format!("duplicate sample id {}", s.id)));
                }
                if s.features.len() != self.input_dim {
                    return Err(invalid(format!("sample {} has wrong width", s.id)));
                }
            }
        }
        Ok(())
    }
}

/// Stacks sample features into an `n × d` tensor.
pub fn stack_features<'a, I: IntoIterator<Item = &'a Sample>>(samples: I) -> Result<Tensor> {
    let rows: Vec<&[f64]> = samples.into_iter().map(|s| s.features.as_slice()).collect();
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    /// Standard deviation of each isotropic Gaussian cluster.
    pub cluster_spread: f64,
    /// Distance between neighbouring class means.
    pub inter_class_margin: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            n_per_class: 50,
            input_dim: 16,
            cluster_spread: 1.0,
            inter_class_margin: 3.0,
            seed: 0,
        }
    }
}

/// Class means: scaled simplex vertices `(margin/√2)·e_c` when there are no
/// more classes than dimensions, otherwise hypercube corners scaled by `margin`.
fn class_means(classes: usize, dim: usize, margin: f64) -> Vec<Vec<f64>> {
    if classes <= dim {
        let a = margin / 2f64.sqrt();
        (0..classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = a;
                m
            })
            .collect()
    } else {
        (0..classes)
            .map(|c| {
                (0..dim)
                    .map(|b| if b < 64 && (c >> b) & 1 == 1 { margin } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Gaussian-cluster stream with an 80/20 train/test split per class.
pub fn gen_synthetic_stream(cfg: &SyntheticConfig) -> Result<TaskStream> {
    if cfg.input_dim < 2 {
        return Err(invalid("input_dim must be at least 2"));
    }
    if cfg.tasks == 0 || cfg.classes_per_task == 0 || cfg.n_per_class == 0 {
        return Err(invalid("task, class and sample counts must be at least 1"));
    }
    if cfg.cluster_spread < 0.0 || !cfg.cluster_spread.is_finite() {
        return Err(invalid("cluster_spread must be non-negative"));
    }
    let total = cfg.tasks * cfg.classes_per_task;
    let means = class_means(total, cfg.input_dim, cfg.inter_class_margin);
    let noise = Normal::new(0.0, cfg.cluster_spread.max(0.0)).map_err(|e| invalid(e.to_string()))?;
    let mut rng = seeded(cfg.seed);
    let n_test = cfg.n_per_class / 5;
    let n_train = cfg.n_per_class - n_test;
    let mut next_id = 0;
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let classes: Vec<usize> = (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            for i in 0..cfg.n_per_class {
                let features = means[c].iter().map(|&m| m + noise.sample(&mut rng)).collect();
                let s = Sample {
                    id: next_id,
                    label: c,
                    task: t,
                    features,
                };
                next_id += 1;
                if i < n_train {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
        tasks.push(Task { index: t, classes, train, test });
    }
    Ok(TaskStream {
        tasks,
        input_dim: cfg.input_dim,
        total_classes: total,
        source_labels: (0..total as u32).collect(),
    })
}

pub const IMAGE_MAGIC: &[u8; 4] = b"CLIS";
pub const IMAGE_VERSION: u16 = 1;
const IMAGE_HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 1;

/// Decoded raw image file.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub height: u16,
    pub width: u16,
    pub channels: u8,
    pub labels: Vec<u16>,
    /// Row-major pixels, one `height·width·channels` vector per record.
    pub pixels: Vec<Vec<u8>>,
}

impl ImageSet {
    pub fn record_len(&self) -> usize {
        self.height as usize * self.width as usize * self.channels as usize
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let rl = self.record_len();
        if self.labels.len() != self.pixels.len() || self.pixels.iter().any(|p| p.len() != rl) {
            return Err(invalid("image set records do not match the declared geometry"));
        }
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.labels.len() * (rl + 2));
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.push(self.channels);
        for (l, p) in self.labels.iter().zip(&self.pixels) {
            out.extend_from_slice(&l.to_le_bytes());
            out.extend_from_slice(p);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, reason: &str| Error::Format {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        if bytes.len() < IMAGE_HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header"));
        }
        if &bytes[0..4] != IMAGE_MAGIC {
            return Err(fmt(0, "bad magic, expected \"CLIS\""));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != IMAGE_VERSION {
            return Err(fmt(4, &format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let height = u16::from_le_bytes([bytes[10], bytes[11]]);
        let width = u16::from_le_bytes([bytes[12], bytes[13]]);
        let channels = bytes[14];
        if height == 0 || width == 0 || channels == 0 {
            return Err(fmt(10, "zero image dimension"));
        }
        let rl = height as usize * width as usize * channels as usize;
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count);
        let mut off = IMAGE_HEADER_LEN;
        for _ in 0..count {
            if off + 2 + rl > bytes.len() {
                return Err(fmt(off, "truncated record"));
            }
            labels.push(u16::from_le_bytes([bytes[off], bytes[off + 1]]));
            pixels.push(bytes[off + 2..off + 2 + rl].to_vec());
            off += 2 + rl;
        }
        if off != bytes.len() {
            return Err(fmt(off, "trailing bytes after last record"));
        }
        Ok(Self {
            height,
            width,
            channels,
            labels,
            pixels,
        })
    }

    /// Byte offset of record `i` (its label field).
    pub fn record_offset(&self, i: usize) -> usize {
        IMAGE_HEADER_LEN + i * (self.record_len() + 2)
    }
}

pub fn write_image_file(path: &Path, set: &ImageSet) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&set.encode()?)?;
    Ok(())
}

/// Loads a raw image file and partitions its labels into tasks.
/// Pixels are scaled to `[0, 1]` and flattened; the last 20% of each class
/// (in file order) is held out for testing.
pub fn load_image_stream(path: &Path, task_splits: &[Vec<u16>]) -> Result<TaskStream> {
    let bytes = std::fs::read(path)?;
    let set = ImageSet::decode(&bytes)?;
    image_stream_from_set(&set, task_splits)
}

pub fn image_stream_from_set(set: &ImageSet, task_splits: &[Vec<u16>]) -> Result<TaskStream> {
    if task_splits.is_empty() {
        return Err(invalid("no task splits given"));
    }
    let mut dense = std::collections::HashMap::new();
    let mut source_labels = Vec::new();
    for split in task_splits {
        if split.is_empty() {
            return Err(invalid("empty task split"));
        }
        for &l in split {
            if dense.insert(l, source_labels.len()).is_some() {
                return Err(invalid(format!("label {l} appears in more than one split")));
            }
            source_labels.push(l as u32);
        }
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); source_labels.len()];
    for (i, &l) in set.labels.iter().enumerate() {
        match dense.get(&l) {
            Some(&c) => per_class[c].push(i),
            None => {
                return Err(Error::Format {
                    offset: set.record_offset(i) as u64,
                    reason: format!("label {l} is not in any task split"),
                })
            }
        }
    }
    if let Some(c) = per_class.iter().position(Vec::is_empty) {
        return Err(invalid(format!("class with label {} has no records", source_labels[c])));
    }
    let mut tasks = Vec::new();
    let mut next_class = 0;
    for (t, split) in task_splits.iter().enumerate() {
        let classes: Vec<usize> = (next_class..next_class + split.len()).collect();
        next_class += split.len();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let recs = &per_class[c];
            let n_test = recs.len() / 5;
            let n_train = recs.len() - n_test;
            for (k, &r) in recs.iter().enumerate() {
                let s = Sample {
                    id: r,
                    label: c,
                    task: t,
                    features: set.pixels[r].iter().map(|&p| p as f64 / 255.0).collect(),
                };
                if k < n_train {
                    train.push(s);
                } else {
                    test.push(s);
                }
            }
        }
        tasks.push(Task { index: t, classes, train, test });
    }
    Ok(TaskStream {
        tasks,
        input_dim: set.record_len(),
        total_classes: source_labels.len(),
        source_labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Identity,
    #[default]
    GaussianNoise,
    CropFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentorConfig {
    pub kind: AugmentKind,
    /// Noise std as a fraction of the stream's feature std (gaussian_noise).
    pub sigma: f64,
    /// Zero padding before random cropping (crop_flip).
    pub crop_pad: usize,
    /// `[height, width, channels]` of flattened images (crop_flip).
    pub image_shape: Option<[usize; 3]>,
}

impl Default for AugmentorConfig {
    fn default() -> Self {
        Self {
            kind: AugmentKind::GaussianNoise,
            sigma: 0.05,
            crop_pad: 2,
            image_shape: None,
        }
    }
}

impl AugmentorConfig {
    pub fn identity() -> Self {
        Self {
            kind: AugmentKind::Identity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(invalid("augmentation strength must be non-negative"));
        }
        if self.kind == AugmentKind::CropFlip && self.image_shape.is_none() {
            return Err(invalid("crop_flip needs image_shape"));
        }
        Ok(())
    }
}

/// Applies one stochastic augmentation to every row of `batch`.
/// `feature_scale` converts the relative noise level into input units.
pub fn augment(batch: &Tensor, cfg: &AugmentorConfig, feature_scale: f64, rng: &mut Rng) -> Result<Tensor> {
    cfg.validate()?;
    match cfg.kind {
        AugmentKind::Identity => Ok(batch.clone()),
        AugmentKind::GaussianNoise => {
            let sd = cfg.sigma * feature_scale;
            if sd == 0.0 {
                return Ok(batch.clone());
            }
            let normal = Normal::new(0.0, sd).map_err(|e| invalid(e.to_string()))?;
            let mut out = batch.clone();
            for v in out.data_mut() {
                *v += normal.sample(rng);
            }
            Ok(out)
        }
        AugmentKind::CropFlip => {
            let [h, w, c] = cfg.image_shape.expect("validated");
            if h * w * c != batch.cols() {
                return Err(Error::ShapeMismatch {
                    op: "augment",
                    left: batch.shape().to_vec(),
                    right: vec![h, w, c],
                });
            }
            let pad = cfg.crop_pad as i64;
            let mut out = batch.clone();
            for r in 0..batch.rows() {
                let src = batch.row(r);
                let dy = rng.random_range(-pad..=pad);
                let dx = rng.random_range(-pad..=pad);
                let flip = rng.random_bool(0.5);
                let dst = out.row_mut(r);
                for y in 0..h as i64 {
                    for x in 0..w as i64 {
                        let sx0 = if flip { w as i64 - 1 - x } else { x };
                        let (sy, sx) = (y + dy, sx0 + dx);
                        for ch in 0..c {
                            let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                                src[(sy as usize * w + sx as usize) * c + ch]
                            } else {
                                0.0
                            };
                            dst[(y as usize * w + x as usize) * c + ch] = v;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}
