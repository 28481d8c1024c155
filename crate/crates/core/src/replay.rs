//! Per-class target distributions, the mean-of-targets proposal and weighted
//! buffer selection without replacement.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::FrozenModel;
use crate::rng::Rng;
use crate::tasks::{augment, stack_features, AugmentorConfig, Sample};
use crate::Tensor;

/// Target distributions of one class `m`: for every prototype `i`, a
/// distribution over the class's samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTargets {
    pub sample_ids: Vec<usize>,
    pub targets: BTreeMap<usize, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetDists {
    pub per_class: BTreeMap<usize, ClassTargets>,
    pub aug_passes: usize,
    pub model_checksum: u64,
}

/// Softmax over the class's own samples of each prototype's scores.
/// `scores` is `K × n` with column `j` belonging to `pool[j]`.
pub fn target_dists_from_scores(scores: &Tensor, pool: &[Sample], seen: &[usize]) -> Result<TargetDists> {
    let (k, n) = scores.matrix_dims();
    if n != pool.len() {
        return Err(Error::ShapeMismatch {
            op: "target_dists_from_scores",
            left: scores.shape().to_vec(),
            right: vec![pool.len()],
        });
    }
    let mut per_class = BTreeMap::new();
    for &m in seen {
        let cols: Vec<usize> = (0..n).filter(|&j| pool[j].label == m).collect();
        if cols.is_empty() {
            return Err(Error::EmptyClass(m));
        }
        let mut targets = BTreeMap::new();
        for &i in seen {
            if i >= k {
                return Err(invalid(format!("no prototype row for class {i}")));
            }
            let row = scores.row(i);
            let mx = cols.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = cols.iter().map(|&j| (row[j] - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            targets.insert(i, e.into_iter().map(|v| v / z).collect());
        }
        per_class.insert(
            m,
            ClassTargets {
                sample_ids: cols.iter().map(|&j| pool[j].id).collect(),
                targets,
            },
        );
    }
    Ok(TargetDists {
        per_class,
        aug_passes: 1,
        model_checksum: 0,
    })
}

/// Scores every pool sample under the frozen model, averaging the scores over
/// `aug_passes` augmented copies, then normalizes within each class.
pub fn compute_target_dists(
    frozen: &FrozenModel,
    pool: &[Sample],
    seen: &[usize],
    aug_passes: usize,
    aug: &AugmentorConfig,
    feature_scale: f64,
    rng: &mut Rng,
) -> Result<TargetDists> {
    if aug_passes == 0 {
        return Err(invalid("aug_passes must be at least 1"));
    }
    if pool.is_empty() {
        return Err(invalid("empty selection pool"));
    }
    let x = stack_features(pool)?;
    let mut acc: Option<Tensor> = None;
    for _ in 0..aug_passes {
        let xa = augment(&x, aug, feature_scale, rng)?;
        let z = frozen.encode(&xa)?;
        let s = frozen.prototype_scores(&z, None)?;
        acc = Some(match acc {
            None => s,
            Some(mut a) => {
                for (d, v) in a.data_mut().iter_mut().zip(s.data()) {
                    *d += v;
                }
                a
            }
        });
    }
    let scores = acc.expect("at least one pass").map(|v| v / aug_passes as f64);
    let mut t = target_dists_from_scores(&scores, pool, seen)?;
    t.aug_passes = aug_passes;
    t.model_checksum = frozen.state().checksum();
    Ok(t)
}

/// Arithmetic mean of normalized target distributions over a class of
/// `class_size` samples. No targets (a single known class) gives uniform.
pub fn compute_proposal(targets: &[&[f64]], class_size: usize) -> Result<Vec<f64>> {
    if class_size == 0 {
        return Err(invalid("empty class"));
    }
    if targets.is_empty() {
        log::warn!("no other classes to contrast against; using a uniform proposal");
        return Ok(vec![1.0 / class_size as f64; class_size]);
    }
    let mut g = vec![0.0; class_size];
    for t in targets {
        if t.len() != class_size {
            return Err(Error::ShapeMismatch {
                op: "compute_proposal",
                left: vec![t.len()],
                right: vec![class_size],
            });
        }
        for (a, &p) in g.iter_mut().zip(t.iter()) {
            *a += p;
        }
    }
    let n = targets.len() as f64;
    for a in &mut g {
        *a /= n;
    }
    let s: f64 = g.iter().sum();
    for a in &mut g {
        *a /= s;
    }
    Ok(g)
}

/// Per-class proposal probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalTable {
    /// class id → (sample id, g) in pool order.
    pub classes: BTreeMap<usize, Vec<(usize, f64)>>,
    pub model_checksum: u64,
    pub aug_passes: usize,
}

impl ProposalTable {
    /// Proposal of each class from every other seen class's target.
    pub fn from_targets(t: &TargetDists) -> Result<Self> {
        let mut classes = BTreeMap::new();
        for (&m, ct) in &t.per_class {
            let others: Vec<&[f64]> = ct
                .targets
                .iter()
                .filter(|(&i, _)| i != m)
                .map(|(_, v)| v.as_slice())
                .collect();
            let g = compute_proposal(&others, ct.sample_ids.len())?;
            classes.insert(m, ct.sample_ids.iter().copied().zip(g).collect());
        }
        Ok(Self {
            classes,
            model_checksum: t.model_checksum,
            aug_passes: t.aug_passes,
        })
    }

    /// Uniform `1/|S_m|` within every class present in `pool`.
    pub fn uniform(pool: &[Sample]) -> Self {
        let mut classes: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for s in pool {
            classes.entry(s.label).or_default().push((s.id, 0.0));
        }
        for v in classes.values_mut() {
            let g = 1.0 / v.len() as f64;
            for e in v.iter_mut() {
                e.1 = g;
            }
        }
        Self {
            classes,
            model_checksum: 0,
            aug_passes: 0,
        }
    }

    pub fn get(&self, class: usize, sample_id: usize) -> Option<f64> {
        self.classes.get(&class)?.iter().find(|e| e.0 == sample_id).map(|e| e.1)
    }

    pub fn check(&self) -> Result<()> {
        for (m, v) in &self.classes {
            let s: f64 = v.iter().map(|e| e.1).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("proposal of class {m} sums to {s}")));
            }
            if let Some(&(id, g)) = v.iter().find(|e| !(e.1 > 0.0)) {
                return Err(invalid(format!("sample {id} of class {m} has proposal {g}")));
            }
        }
        Ok(())
    }
}

/// Splits `capacity` equally over classes (given in class-id order), the
/// remainder going to the earliest classes. A class smaller than its share
/// keeps everything and its surplus goes round-robin to classes with room.
pub fn allocate_slots(class_sizes: &[usize], capacity: usize) -> Result<Vec<usize>> {
    let k = class_sizes.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    if capacity < k {
        return Err(invalid(format!("capacity {capacity} is below the {k} seen classes")));
    }
    let mut alloc: Vec<usize> = (0..k).map(|c| capacity / k + usize::from(c < capacity % k)).collect();
    let mut surplus = 0;
    for (a, &n) in alloc.iter_mut().zip(class_sizes) {
        if *a > n {
            surplus += *a - n;
            *a = n;
        }
    }
    while surplus > 0 {
        let mut gave = false;
        for c in 0..k {
            if surplus == 0 {
                break;
            }
            if alloc[c] < class_sizes[c] {
                alloc[c] += 1;
                surplus -= 1;
                gave = true;
            }
        }
        if !gave {
            break;
        }
    }
    Ok(alloc)
}

/// Indices of `take` items drawn without replacement with probability
/// proportional to `weights`: key `-ln(u)/w`, smallest keys win.
pub fn weighted_sample_without_replacement(weights: &[f64], take: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if let Some(p) = weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::DegenerateProposal {
            position: p,
            weight: weights[p],
        });
    }
    let mut keys: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let u = 1.0 - rng.random::<f64>();
            (-u.ln() / w, i)
        })
        .collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = keys.into_iter().take(take).map(|k| k.1).collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub sample: Sample,
    /// Proposal probability at selection time.
    pub g: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub entries: Vec<BufferEntry>,
    pub capacity: usize,
}

impl ReplayBuffer {
    pub fn empty(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `|J_m|` per stored class.
    pub fn per_class_counts(&self) -> BTreeMap<usize, usize> {
        let mut c = BTreeMap::new();
        for e in &self.entries {
            *c.entry(e.sample.label).or_insert(0) += 1;
        }
        c
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class_counts().into_keys().collect()
    }

    pub fn samples(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter().map(|e| &e.sample)
    }

    /// Keeps the whole pool with `g = 1/|S_m|`.
    pub fn full_retention(pool: &[Sample]) -> Self {
        let table = ProposalTable::uniform(pool);
        let entries = pool
            .iter()
            .map(|s| BufferEntry {
                sample: s.clone(),
                g: table.get(s.label, s.id).expect("present"),
            })
            .collect();
        Self {
            entries,
            capacity: pool.len(),
        }
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.snapshot_tsv().as_bytes())
    }

    /// Tab-separated snapshot: a header row, then
    /// `sample_id, class_id, g, task` per entry (task numbered from 1).
    pub fn snapshot_tsv(&self) -> String {
        let mut out = String::from("sample_id\tclass_id\tg\ttask\n");
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}\t{:.16e}\t{}", e.sample.id, e.sample.label, e.g, e.sample.task + 1);
        }
        out
    }
}

/// One parsed snapshot row.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotRow {
    pub sample_id: usize,
    pub class_id: usize,
    pub g: f64,
    pub task: usize,
}

pub fn parse_snapshot(text: &str) -> Result<Vec<SnapshotRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("sample_id\tclass_id\tg\ttask") => {}
        _ => return Err(invalid("missing snapshot header")),
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || invalid(format!("malformed snapshot line {}", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(SnapshotRow {
                sample_id: f[0].parse().map_err(|_| bad())?,
                class_id: f[1].parse().map_err(|_| bad())?,
                g: f[2].parse().map_err(|_| bad())?,
                task: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Reselects the buffer from `pool` (old buffer plus the current task):
/// equal per-class allocation, then weighted draws without replacement
/// within each class with probabilities from `proposal`.
pub fn select_buffer(pool: &[Sample], proposal: &ProposalTable, capacity: usize, rng: &mut Rng) -> Result<ReplayBuffer> {
    let mut by_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
    for s in pool {
        by_class.entry(s.label).or_default().push(s);
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let alloc = allocate_slots(&sizes, capacity)?;
    let mut entries = Vec::with_capacity(capacity);
    for ((m, members), take) in by_class.iter().zip(alloc) {
        let g: Vec<f64> = members
            .iter()
            .map(|s| {
                proposal
                    .get(*m, s.id)
                    .ok_or_else(|| invalid(format!("no proposal for sample {} of class {m}", s.id)))
            })
            .collect::<Result<_>>()?;
        let picked = if take >= members.len() {
            (0..members.len()).collect()
        } else {
            weighted_sample_without_replacement(&g, take, rng)?
        };
        for j in picked {
            entries.push(BufferEntry {
                sample: members[j].clone(),
                g: g[j],
            });
        }
    }
    Ok(ReplayBuffer { entries, capacity })
}
