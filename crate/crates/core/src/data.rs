//! Synthetic multi-source tasks with controllable domain shift, the binary
//! dataset format, and per-domain mini-batch sampling.
//!
//! Each domain draws from a base generator (two moons or Gaussian blobs) and
//! then applies its own [`ShiftSpec`]: scale, rotate in the first two
//! coordinates, translate, and finally add isotropic Gaussian noise.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{substream, Stream};

/// Fraction of the target domain held out (with labels) for evaluation.
pub const TARGET_TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub name: String,
    /// `[n×D]`
    pub features: Matrix,
    /// Present exactly for labelled domains.
    pub labels: Option<Vec<usize>>,
    pub role: Role,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    /// Radians, applied in the plane of the first two coordinates.
    pub rotation: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_std: f64,
}

impl ShiftSpec {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: 0.0,
            translation: vec![0.0; dim],
            scale: 1.0,
            noise_std: 0.0,
        }
    }

    pub fn rotated(dim: usize, degrees: f64, noise_std: f64) -> Self {
        Self {
            rotation: degrees.to_radians(),
            noise_std,
            ..Self::identity(dim)
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::contract(format!(
                "shift scale must be positive, got {}",
                self.scale
            )));
        }
        if self.translation.len() != dim {
            return Err(Error::contract(format!(
                "translation has {} entries, feature dimension is {dim}",
                self.translation.len()
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::contract("noise_std must be non-negative"));
        }
        Ok(())
    }

    /// Deterministic part of the shift: scale, rotate, translate.
    pub fn apply(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v *= self.scale;
        }
        if x.len() >= 2 {
            let (s, c) = self.rotation.sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }

    pub fn invert(&self, x: &mut [f64]) {
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v -= t;
        }
        if x.len() >= 2 {
            let (s, c) = self.rotation.sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a + s * b;
            x[1] = -s * a + c * b;
        }
        for v in x.iter_mut() {
            *v /= self.scale;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    /// Two interleaved half circles, `K = 2`, `D = 2`.
    TwoMoons,
    /// `K` isotropic clusters with centers evenly spaced on a circle.
    GaussianBlobs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub dim: usize,
    pub samples_per_domain: usize,
    /// Radius of the circle holding blob centers.
    pub blob_radius: f64,
    /// Per-coordinate standard deviation of each blob.
    pub blob_std: f64,
    pub source_shifts: Vec<ShiftSpec>,
    pub target_shift: ShiftSpec,
    pub seed: u64,
}

impl TaskSpec {
    /// Two moons; sources rotated 0°, 15°, 30° and the target 45°.
    pub fn default_benchmark() -> Self {
        let noise = 0.1;
        Self {
            generator: Generator::TwoMoons,
            num_classes: 2,
            dim: 2,
            samples_per_domain: 2000,
            blob_radius: 3.0,
            blob_std: 1.0,
            source_shifts: [0.0, 15.0, 30.0]
                .iter()
                .map(|&deg| ShiftSpec::rotated(2, deg, noise))
                .collect(),
            target_shift: ShiftSpec::rotated(2, 45.0, noise),
            seed: 0,
        }
    }

    /// Four blobs; one source shares the target's 45° rotation, the other is
    /// left unrotated, which moves every blob halfway to its neighbour's slot.
    pub fn asymmetric_blobs() -> Self {
        Self {
            generator: Generator::GaussianBlobs,
            num_classes: 4,
            source_shifts: vec![ShiftSpec::rotated(2, 45.0, 0.0), ShiftSpec::identity(2)],
            target_shift: ShiftSpec::rotated(2, 45.0, 0.0),
            ..Self::default_benchmark()
        }
    }

    pub fn num_sources(&self) -> usize {
        self.source_shifts.len()
    }

    /// Checks everything [`generate_task`] would reject, without sampling.
    pub fn validate(&self) -> Result<()> {
        validate_spec(self)
    }
}

/// Generated sources plus a target split into an unlabelled training part and
/// a labelled test part.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub num_classes: usize,
    pub sources: Vec<Domain>,
    /// Unlabelled target training data.
    pub target: Domain,
    /// Labels of `target`, kept for reporting only.
    pub held_out_target_labels: Vec<usize>,
    /// Labelled target evaluation split.
    pub target_test: Domain,
}

impl Task {
    pub fn dim(&self) -> usize {
        self.target.features.cols()
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }
}

fn base_point(spec: &TaskSpec, label: usize, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    match spec.generator {
        Generator::TwoMoons => {
            let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
            // Centered on the moons' midpoint so rotations pivot on the data.
            if label == 0 {
                out[0] = t.cos() - 0.5;
                out[1] = t.sin() - 0.25;
            } else {
                out[0] = 0.5 - t.cos();
                out[1] = 0.25 - t.sin();
            }
        }
        Generator::GaussianBlobs => {
            let normal = Normal::new(0.0, spec.blob_std).expect("validated std");
            let angle = 2.0 * std::f64::consts::PI * label as f64 / spec.num_classes as f64;
            for (d, v) in out.iter_mut().enumerate() {
                let center = match d {
                    0 => spec.blob_radius * angle.cos(),
                    1 => spec.blob_radius * angle.sin(),
                    _ => 0.0,
                };
                *v = center + normal.sample(rng);
            }
        }
    }
}

fn validate_spec(spec: &TaskSpec) -> Result<()> {
    if spec.source_shifts.is_empty() {
        return Err(Error::contract("task needs at least one source domain"));
    }
    if spec.num_classes < 2 {
        return Err(Error::contract("task needs at least two classes"));
    }
    match spec.generator {
        Generator::TwoMoons if spec.num_classes != 2 || spec.dim != 2 => {
            return Err(Error::contract(
                "two_moons requires num_classes = 2 and dim = 2",
            ));
        }
        Generator::GaussianBlobs if spec.dim < 2 => {
            return Err(Error::contract("gaussian_blobs requires dim >= 2"));
        }
        Generator::GaussianBlobs if !(spec.blob_std > 0.0) => {
            return Err(Error::contract("blob_std must be positive"));
        }
        _ => {}
    }
    if spec.samples_per_domain < 4 * spec.num_classes {
        return Err(Error::InsufficientData(format!(
            "{} samples per domain, need at least {} (4 per class)",
            spec.samples_per_domain,
            4 * spec.num_classes
        )));
    }
    for s in spec.source_shifts.iter().chain([&spec.target_shift]) {
        s.validate(spec.dim)?;
    }
    Ok(())
}

fn sample_domain(spec: &TaskSpec, shift: &ShiftSpec, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let n = spec.samples_per_domain;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, shift.noise_std).expect("validated noise");
    let mut features = Matrix::zeros(n, spec.dim);
    for (i, &y) in labels.iter().enumerate() {
        let row = features.row_mut(i);
        base_point(spec, y, rng, row);
        shift.apply(row);
        if shift.noise_std > 0.0 {
            for v in row.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    (features, labels)
}

/// Deterministic in `spec.seed` (data substream).
pub fn generate_task(spec: &TaskSpec) -> Result<Task> {
    validate_spec(spec)?;
    let mut rng = substream(spec.seed, Stream::Data);
    let sources = spec
        .source_shifts
        .iter()
        .enumerate()
        .map(|(m, shift)| {
            let (features, labels) = sample_domain(spec, shift, &mut rng);
            Domain {
                name: format!("source{m}"),
                features,
                labels: Some(labels),
                role: Role::Source,
            }
        })
        .collect();
    let (features, labels) = sample_domain(spec, &spec.target_shift, &mut rng);

    // Stratified split: the first 20% (rounded) of each class, in draw order, is test.
    let mut per_class = vec![0usize; spec.num_classes];
    for &y in &labels {
        per_class[y] += 1;
    }
    let quota: Vec<usize> = per_class
        .iter()
        .map(|&c| (c as f64 * TARGET_TEST_FRACTION).round() as usize)
        .collect();
    let mut taken = vec![0usize; spec.num_classes];
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    for (i, &y) in labels.iter().enumerate() {
        if taken[y] < quota[y] {
            taken[y] += 1;
            test_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    Ok(Task {
        num_classes: spec.num_classes,
        sources,
        target: Domain {
            name: "target".into(),
            features: features.select_rows(&train_idx),
            labels: None,
            role: Role::Target,
        },
        held_out_target_labels: pick(&train_idx),
        target_test: Domain {
            name: "target_test".into(),
            features: features.select_rows(&test_idx),
            labels: Some(pick(&test_idx)),
            role: Role::Target,
        },
    })
}

const DATA_MAGIC: &[u8; 8] = b"CRMADATA";
const DATA_VERSION: u32 = 1;

#[derive(Clone, Copy, PartialEq, Eq)]
enum BlockRole {
    Source = 0,
    TargetTrain = 1,
    TargetTest = 2,
}

/// Writes `task` in the little-endian dataset format:
///
/// ```text
/// magic "CRMADATA" | version u32 | M u32 | K u32 | D u32 | blocks u32 (= M + 2)
/// per block: role u8 (0 source, 1 target train, 2 target test) | has_labels u8
///            | n u64 | name_len u32 | name utf-8
/// per block, in the same order: n×D f64 features, then n i32 labels if has_labels
/// ```
///
/// Target-train labels are stored (flagged) so held-out metrics survive a round trip.
pub fn write_dataset(task: &Task, w: &mut impl Write) -> Result<()> {
    let mut out = Writer::new(w);
    out.bytes(DATA_MAGIC)?;
    out.u32(DATA_VERSION)?;
    out.u32(task.sources.len() as u32)?;
    out.u32(task.num_classes as u32)?;
    out.u32(task.dim() as u32)?;
    let blocks = blocks(task);
    out.u32(blocks.len() as u32)?;
    for (role, domain, labels) in &blocks {
        out.u8(*role as u8)?;
        out.u8(labels.is_some() as u8)?;
        out.u64(domain.len() as u64)?;
        out.u32(domain.name.len() as u32)?;
        out.bytes(domain.name.as_bytes())?;
    }
    for (_, domain, labels) in &blocks {
        out.f64s(domain.features.data())?;
        if let Some(labels) = labels {
            for &y in labels.iter() {
                out.i32(y as i32)?;
            }
        }
    }
    Ok(())
}

fn blocks(task: &Task) -> Vec<(BlockRole, &Domain, Option<&[usize]>)> {
    let mut v: Vec<_> = task
        .sources
        .iter()
        .map(|d| (BlockRole::Source, d, d.labels.as_deref()))
        .collect();
    v.push((
        BlockRole::TargetTrain,
        &task.target,
        Some(&task.held_out_target_labels),
    ));
    v.push((
        BlockRole::TargetTest,
        &task.target_test,
        task.target_test.labels.as_deref(),
    ));
    v
}

pub fn read_dataset(bytes: &[u8]) -> Result<Task> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATA_MAGIC)?;
    r.expect_version(DATA_VERSION)?;
    let m = r.u32()? as usize;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let offset = r.offset();
    let count = r.u32()? as usize;
    if count != m + 2 {
        return Err(Error::Format {
            offset,
            detail: format!("{count} domain blocks for {m} sources"),
        });
    }
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let offset = r.offset();
        let role = match r.u8()? {
            0 => BlockRole::Source,
            1 => BlockRole::TargetTrain,
            2 => BlockRole::TargetTest,
            other => {
                return Err(Error::Format {
                    offset,
                    detail: format!("unknown role flag {other}"),
                })
            }
        };
        let has_labels = r.u8()? != 0;
        let n = r.u64()? as usize;
        let len = r.u32()? as usize;
        let name_offset = r.offset();
        let name = String::from_utf8(r.raw(len)?.to_vec()).map_err(|_| Error::Format {
            offset: name_offset,
            detail: "domain name is not utf-8".into(),
        })?;
        headers.push((role, has_labels, n, name));
    }

    let mut sources = Vec::with_capacity(m);
    let mut target = None;
    let mut target_test = None;
    for (role, has_labels, n, name) in headers {
        let features = Matrix::from_vec(n, dim, r.f64s(n * dim)?)?;
        let labels = if has_labels {
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let offset = r.offset();
                let y = r.i32()?;
                if y < 0 || y as usize >= k {
                    return Err(Error::Format {
                        offset,
                        detail: format!("label {y} outside 0..{k}"),
                    });
                }
                ys.push(y as usize);
            }
            Some(ys)
        } else {
            None
        };
        match role {
            BlockRole::Source => sources.push(Domain {
                name,
                features,
                labels,
                role: Role::Source,
            }),
            BlockRole::TargetTrain => {
                target = Some((
                    Domain {
                        name,
                        features,
                        labels: None,
                        role: Role::Target,
                    },
                    labels.unwrap_or_default(),
                ))
            }
            BlockRole::TargetTest => {
                target_test = Some(Domain {
                    name,
                    features,
                    labels,
                    role: Role::Target,
                })
            }
        }
    }
    if !r.is_at_end() {
        return Err(Error::Format {
            offset: r.offset(),
            detail: "trailing bytes".into(),
        });
    }
    let missing = |what: &str| Error::Format {
        offset: r.offset(),
        detail: format!("missing {what} block"),
    };
    let (target, held_out_target_labels) = target.ok_or_else(|| missing("target"))?;
    let target_test = target_test.ok_or_else(|| missing("target test"))?;
    if sources.len() != m || sources.iter().any(|d| d.labels.is_none()) {
        return Err(missing("labelled source"));
    }
    Ok(Task {
        num_classes: k,
        sources,
        target,
        held_out_target_labels,
        target_test,
    })
}

pub fn save_dataset(task: &Task, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(task, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Task> {
    read_dataset(&std::fs::read(path)?)
}

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UnlabeledBatch {
    pub indices: Vec<usize>,
    pub features: Matrix,
}

/// One iteration's data: a labelled batch per source and one target batch.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub sources: Vec<LabeledBatch>,
    pub target: UnlabeledBatch,
}

struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn next_indices(&mut self, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Endless stream of [`DomainBatch`]es.
///
/// Each domain walks its own shuffled permutation and reshuffles when it runs
/// out, so smaller domains wrap around while larger ones finish an epoch. An
/// epoch is `ceil(largest domain / batch)` batches, which covers every sample
/// of every domain at least once.
pub struct BatchSampler<'a> {
    sources: &'a [Domain],
    target: &'a Domain,
    batch: usize,
    cursors: Vec<Cursor>,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        sources: &'a [Domain],
        target: &'a Domain,
        batch: usize,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let mut rng = rng;
        let mut cursors = Vec::with_capacity(sources.len() + 1);
        for d in sources.iter().chain([target]) {
            if d.is_empty() {
                return Err(Error::contract(format!("domain {} is empty", d.name)));
            }
            if batch > d.len() {
                return Err(Error::contract(format!(
                    "batch {batch} larger than domain {} ({} samples)",
                    d.name,
                    d.len()
                )));
            }
            if d.role == Role::Source && d.labels.is_none() {
                return Err(Error::contract(format!("source {} has no labels", d.name)));
            }
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.shuffle(&mut rng);
            cursors.push(Cursor { order, pos: 0 });
        }
        Ok(Self {
            sources,
            target,
            batch,
            cursors,
            rng,
        })
    }

    /// Convenience constructor on the shuffle substream of `seed`.
    pub fn seeded(
        sources: &'a [Domain],
        target: &'a Domain,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(sources, target, batch, substream(seed, Stream::Shuffle))
    }

    pub fn batches_per_epoch(&self) -> usize {
        let largest = self
            .sources
            .iter()
            .chain([self.target])
            .map(Domain::len)
            .max()
            .unwrap_or(0);
        largest.div_ceil(self.batch)
    }

    pub fn next_indices(&mut self) -> Vec<Vec<usize>> {
        let b = self.batch;
        let rng = &mut self.rng;
        self.cursors
            .iter_mut()
            .map(|c| c.next_indices(b, rng))
            .collect()
    }

    pub fn next_batch(&mut self) -> DomainBatch {
        let mut idx = self.next_indices();
        let target_idx = idx.pop().expect("target cursor");
        let sources = self
            .sources
            .iter()
            .zip(idx)
            .map(|(d, indices)| {
                let labels = d.labels.as_ref().expect("checked in new");
                LabeledBatch {
                    features: d.features.select_rows(&indices),
                    labels: indices.iter().map(|&i| labels[i]).collect(),
                    indices,
                }
            })
            .collect();
        DomainBatch {
            sources,
            target: UnlabeledBatch {
                features: self.target.features.select_rows(&target_idx),
                indices: target_idx,
            },
        }
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        Some(self.next_batch())
    }
}
