//! Oracles and criterion checks shared by the core test suites and the
//! workspace acceptance target.
#![allow(dead_code)]


use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crma_core::autodiff::{grad_check_multi, Tape, Tensor};
use crma_core::data::{LabeledBatch, UnlabeledBatch};
use crma_core::losses;
use crma_core::nn::{BoundModel, Prediction};
use crma_core::trainer::metrics_csv;
use crma_core::{
    generate_task, train, Ablation, Architecture, Branch, CrmaModel, DomainBatch, Matrix,
    ParamGroup, Task, TaskSpec, TrainConfig, Trainable, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Row-wise softmax of random logits.
pub fn random_probs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let logits = random_matrix(rng, rows, cols, 3.0);
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&oracle::softmax(logits.row(r)));
    }
    out
}

pub fn random_prob_vec(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    random_probs(rng, 1, k).row(0).to_vec()
}

/// Hash of the raw bits of every parameter in the selected groups.
pub fn params_hash(model: &CrmaModel, select: impl Fn(ParamGroup) -> bool) -> u64 {
    let mut h = DefaultHasher::new();
    for (g, p) in model.params() {
        if select(g) {
            for v in p.data() {
                v.to_bits().hash(&mut h);
            }
        }
    }
    h.finish()
}

pub fn is_extractor(g: ParamGroup) -> bool {
    g == ParamGroup::Extractor
}

pub fn is_classifier(g: ParamGroup) -> bool {
    !is_extractor(g)
}

pub fn max_param_diff(a: &CrmaModel, b: &CrmaModel) -> f64 {
    a.params()
        .iter()
        .zip(b.params())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Two-moons task with the default shifts but `samples` per domain.
pub fn small_task(samples: usize, seed: u64) -> Task {
    generate_task(&TaskSpec {
        samples_per_domain: samples,
        seed,
        ..TaskSpec::default_benchmark()
    })
    .unwrap()
}

/// Every sample of every domain in one batch.
pub fn full_batch(task: &Task) -> DomainBatch {
    DomainBatch {
        sources: task
            .sources
            .iter()
            .map(|d| LabeledBatch {
                indices: (0..d.len()).collect(),
                features: d.features.clone(),
                labels: d.labels.clone().unwrap(),
            })
            .collect(),
        target: UnlabeledBatch {
            indices: (0..task.target.len()).collect(),
            features: task.target.features.clone(),
        },
    }
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        extractor_widths: vec![16, 16],
        head_hidden: vec![8],
        batch_per_domain: 32,
        epochs: 3,
        seed,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------------------
// Gradient checks

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub const LOSS_NAMES: [&str; 6] = [
    "source CE",
    "L_intra",
    "L_inter",
    "classifier objective",
    "extractor objective",
    "L_AST",
];

fn pairs_from_logits(tape: &mut Tape, logits: &[Tensor]) -> Vec<(Prediction, Prediction)> {
    logits
        .chunks(2)
        .enumerate()
        .map(|(m, c)| {
            let pred = |tape: &mut Tape, t: Tensor, branch| Prediction {
                probs: tape.softmax(t).unwrap(),
                logits: t,
                domain: m,
                branch,
            };
            (pred(tape, c[0], Branch::A), pred(tape, c[1], Branch::B))
        })
        .collect()
}

/// Fixed inputs of one random gradient-check configuration.
pub struct GradCase {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub labels: Vec<Vec<usize>>,
    pub pseudo: Matrix,
    pub beta: Vec<f64>,
    pub alpha: f64,
}

impl GradCase {
    pub fn new(index: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = [1, 2, 3][index % 3];
        let k = [2, 4][(index / 3) % 2];
        let n = 8;
        Self {
            m,
            k,
            n,
            labels: (0..m)
                .map(|_| (0..n).map(|_| rng.random_range(0..k)).collect())
                .collect(),
            pseudo: random_probs(rng, n, k),
            beta: (0..n).map(|_| rng.random_range(0.0..3.0)).collect(),
            alpha: 0.5,
        }
    }

    /// Loss `which` (index into [`LOSS_NAMES`]) from per-domain source pairs and target pairs.
    pub fn loss(
        &self,
        tape: &mut Tape,
        which: usize,
        source: &[(Prediction, Prediction)],
        target: &[(Prediction, Prediction)],
    ) -> crma_core::Result<Tensor> {
        let labels: Vec<&[usize]> = self.labels.iter().map(Vec::as_slice).collect();
        let src = |tape: &mut Tape| losses::source_ce_loss(tape, source, &labels);
        let intra = |tape: &mut Tape| losses::intra_consistency_loss(tape, target).map(|i| i.loss);
        let inter = |tape: &mut Tape| {
            let means = losses::mean_predictions(tape, target)?;
            losses::inter_consistency_loss(tape, &means)
        };
        match which {
            0 => src(tape),
            1 => intra(tape),
            2 => inter(tape),
            3 => {
                let (s, i) = (src(tape)?, intra(tape)?);
                losses::classifier_objective(tape, s, i)
            }
            4 => {
                let (i, e) = (intra(tape)?, inter(tape)?);
                losses::extractor_objective(tape, i, e, self.alpha)
            }
            _ => losses::ast_loss(tape, target, &self.pseudo, &self.beta),
        }
    }

    /// Gradient check with respect to raw head logits: `2M` source and `2M` target matrices.
    pub fn check_logits(&self, which: usize, rng: &mut ChaCha8Rng) -> f64 {
        let points: Vec<Matrix> = (0..4 * self.m)
            .map(|_| random_matrix(rng, self.n, self.k, 2.0))
            .collect();
        let half = 2 * self.m;
        grad_check_multi(
            |tape, xs| {
                let source = pairs_from_logits(tape, &xs[..half]);
                let target = pairs_from_logits(tape, &xs[half..]);
                self.loss(tape, which, &source, &target)
            },
            &points,
            GRAD_H,
        )
        .unwrap()
    }

    /// Gradient check through a small model's parameters with the real
    /// binding and gradient-collection path.
    pub fn check_model(&self, which: usize, rng: &mut ChaCha8Rng) -> f64 {
        let arch = Architecture {
            input_dim: 3,
            extractor_widths: vec![6],
            head_hidden: vec![5],
            num_domains: self.m,
            num_classes: self.k,
        };
        let mut model = CrmaModel::new(arch, rng).unwrap();
        for (_, p) in model.params_mut() {
            for v in p.data_mut() {
                if v.abs() < 1e-3 {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
        }
        let xs: Vec<Matrix> = (0..self.m)
            .map(|_| random_matrix(rng, self.n, 3, 2.0))
            .collect();
        let xt = random_matrix(rng, self.n, 3, 2.0);
        model_grad_check(&mut model, |tape, bound| {
            let mut source = Vec::new();
            for (d, x) in xs.iter().enumerate() {
                let x = tape.constant(x.clone());
                let f = bound.forward_features(tape, x)?;
                source.push(bound.predict_pair(tape, d, f)?);
            }
            let x = tape.constant(xt.clone());
            let f = bound.forward_features(tape, x)?;
            let target = bound.predict_all(tape, f)?;
            self.loss(tape, which, &source, &target)
        })
    }
}

/// Central differences over every model parameter against `BoundModel::gradients`.
pub fn model_grad_check<F>(model: &mut CrmaModel, f: F) -> f64
where
    F: Fn(&mut Tape, &BoundModel) -> crma_core::Result<Tensor>,
{
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::ALL);
    let out = f(&mut tape, &bound).unwrap();
    tape.backward(out).unwrap();
    let analytic = bound.gradients(&tape);

    let eval = |model: &CrmaModel| {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, Trainable::NONE);
        let out = f(&mut tape, &bound).unwrap();
        tape.item(out)
    };
    let mut worst = 0.0f64;
    let count = model.params().len();
    for p in 0..count {
        let len = model.params()[p].1.len();
        for i in 0..len {
            let x = model.params()[p].1.data()[i];
            model.params_mut()[p].1.data_mut()[i] = x + GRAD_H;
            let plus = eval(model);
            model.params_mut()[p].1.data_mut()[i] = x - GRAD_H;
            let minus = eval(model);
            model.params_mut()[p].1.data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * GRAD_H);
            let a = analytic[p].data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

/// Criterion 1: worst relative error per loss over 20 random configurations,
/// against logits and against model parameters.
pub fn gradient_suite(seed: u64) -> [f64; 6] {
    let mut rng = rng(seed);
    let mut worst = [0.0f64; 6];
    for index in 0..20 {
        let case = GradCase::new(index, &mut rng);
        for (which, w) in worst.iter_mut().enumerate() {
            *w = w.max(case.check_logits(which, &mut rng));
            *w = w.max(case.check_model(which, &mut rng));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Min/max dynamics

/// Batch `L_intra` and `L_inter` of `model` on the target batch.
pub fn consistency(model: &CrmaModel, batch: &DomainBatch) -> (f64, f64) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, Trainable::NONE);
    let x = tape.constant(batch.target.features.clone());
    let f = bound.forward_features(&mut tape, x).unwrap();
    let pairs = bound.predict_all(&mut tape, f).unwrap();
    let intra = losses::intra_consistency_loss(&mut tape, &pairs).unwrap();
    let means = losses::mean_predictions(&mut tape, &pairs).unwrap();
    let inter = losses::inter_consistency_loss(&mut tape, &means).unwrap();
    (tape.item(intra.loss), tape.item(inter))
}

fn grad_norm(
    model: &CrmaModel,
    trainable: Trainable,
    f: impl Fn(&mut Tape, &BoundModel) -> Tensor,
) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let out = f(&mut tape, &bound);
    if !tape.requires_grad(out) {
        return 0.0;
    }
    tape.backward(out).unwrap();
    bound
        .gradients(&tape)
        .iter()
        .flat_map(|g| g.data().iter().map(|v| v * v).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug)]
pub struct MinMaxCase {
    pub intra_before: f64,
    pub intra_after: f64,
    pub classifier_grad: f64,
    pub objective_before: f64,
    pub objective_after: f64,
    pub extractor_grad: f64,
    pub extractor_frozen: bool,
    pub classifiers_frozen: bool,
}

impl MinMaxCase {
    pub fn passed(&self) -> bool {
        let max_ok = self.classifier_grad <= 1e-8 || self.intra_after > self.intra_before;
        let min_ok = self.extractor_grad <= 1e-8 || self.objective_after < self.objective_before;
        max_ok && min_ok && self.extractor_frozen && self.classifiers_frozen
    }
}

pub const MINMAX_LR: f64 = 1e-4;

/// Criterion 4 for one seed: full-batch classifier step, then extractor step, at lr 1e-4.
pub fn minmax_case(seed: u64) -> MinMaxCase {
    let task = small_task(64, seed);
    let batch = full_batch(&task);
    let config = TrainConfig {
        base_lr: MINMAX_LR,
        seed,
        ..small_config(seed)
    };
    let alpha = config.alpha;
    let arch = config.architecture(task.dim(), task.num_sources(), task.num_classes);
    let mut trainer = Trainer::new(config, arch).unwrap();

    let target = |tape: &mut Tape, bound: &BoundModel| {
        let x = tape.constant(batch.target.features.clone());
        let f = bound.forward_features(tape, x).unwrap();
        bound.predict_all(tape, f).unwrap()
    };

    let classifier_grad = grad_norm(trainer.model(), Trainable::CLASSIFIERS, |tape, bound| {
        let mut source = Vec::new();
        for (d, s) in batch.sources.iter().enumerate() {
            let x = tape.constant(s.features.clone());
            let f = bound.forward_features(tape, x).unwrap();
            source.push(bound.predict_pair(tape, d, f).unwrap());
        }
        let labels: Vec<&[usize]> = batch.sources.iter().map(|s| s.labels.as_slice()).collect();
        let l_src = losses::source_ce_loss(tape, &source, &labels).unwrap();
        let pairs = target(tape, bound);
        let intra = losses::intra_consistency_loss(tape, &pairs).unwrap();
        losses::classifier_objective(tape, l_src, intra.loss).unwrap()
    });
    let (intra_before, _) = consistency(trainer.model(), &batch);
    let extractor_hash = params_hash(trainer.model(), is_extractor);
    trainer.step_classifiers(&batch).unwrap();
    let (intra_after, _) = consistency(trainer.model(), &batch);
    let extractor_frozen = params_hash(trainer.model(), is_extractor) == extractor_hash;

    let extractor_grad = grad_norm(trainer.model(), Trainable::EXTRACTOR, |tape, bound| {
        let pairs = target(tape, bound);
        let intra = losses::intra_consistency_loss(tape, &pairs).unwrap();
        let means = losses::mean_predictions(tape, &pairs).unwrap();
        let inter = losses::inter_consistency_loss(tape, &means).unwrap();
        losses::extractor_objective(tape, intra.loss, inter, alpha).unwrap()
    });
    let (i0, e0) = consistency(trainer.model(), &batch);
    let classifier_hash = params_hash(trainer.model(), is_classifier);
    trainer.step_extractor(&batch).unwrap();
    let (i1, e1) = consistency(trainer.model(), &batch);
    let classifiers_frozen = params_hash(trainer.model(), is_classifier) == classifier_hash;

    MinMaxCase {
        intra_before,
        intra_after,
        classifier_grad,
        objective_before: i0 + alpha * e0,
        objective_after: i1 + alpha * e1,
        extractor_grad,
        extractor_frozen,
        classifiers_frozen,
    }
}

// ---------------------------------------------------------------------------
// Degenerate equivalences

/// Single-source MCD plus self-training, written directly against the tape
/// without the loss module or the trainer.
pub struct DirectSingleSource {
    pub params: Vec<Matrix>,
    velocity: Vec<Matrix>,
    extractor_layers: usize,
    head_layers: usize,
    sum: f64,
    count: f64,
    lr: f64,
    mu: f64,
    alpha: f64,
    lambda: f64,
}

impl DirectSingleSource {
    pub fn new(model: &CrmaModel, config: &TrainConfig) -> Self {
        let params: Vec<Matrix> = model.params().into_iter().map(|(_, p)| p.clone()).collect();
        let arch = model.architecture();
        let mu = match config.optimizer {
            crma_core::trainer::OptimizerKind::SgdMomentum(mu) => mu,
            crma_core::trainer::OptimizerKind::Sgd => 0.0,
        };
        Self {
            velocity: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            params,
            extractor_layers: arch.extractor_widths.len(),
            head_layers: arch.head_hidden.len() + 1,
            sum: 0.0,
            count: 0.0,
            lr: config.base_lr,
            mu,
            alpha: config.alpha,
            lambda: config.lambda,
        }
    }

    fn n_extractor(&self) -> usize {
        2 * self.extractor_layers
    }

    fn bind(&self, tape: &mut Tape, extractor: bool, heads: bool) -> Vec<Tensor> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                tape.leaf(
                    p.clone(),
                    if i < self.n_extractor() {
                        extractor
                    } else {
                        heads
                    },
                )
            })
            .collect()
    }

    /// Probabilities of heads a and b.
    fn forward(&self, tape: &mut Tape, t: &[Tensor], x: &Matrix) -> (Tensor, Tensor) {
        let mut h = tape.constant(x.clone());
        for l in 0..self.extractor_layers {
            let z = tape.matmul(h, t[2 * l]).unwrap();
            let z = tape.add_row(z, t[2 * l + 1]).unwrap();
            h = tape.relu(z);
        }
        let mut head = |offset: usize| {
            let mut z = h;
            for l in 0..self.head_layers {
                let y = tape.matmul(z, t[offset + 2 * l]).unwrap();
                z = tape.add_row(y, t[offset + 2 * l + 1]).unwrap();
                if l + 1 < self.head_layers {
                    z = tape.relu(z);
                }
            }
            tape.softmax(z).unwrap()
        };
        let a = head(self.n_extractor());
        let b = head(self.n_extractor() + 2 * self.head_layers);
        (a, b)
    }

    fn ce(tape: &mut Tape, p: Tensor, labels: &[usize]) -> Tensor {
        let (n, k) = tape.shape(p);
        let mut mask = Matrix::zeros(n, k);
        for (i, &y) in labels.iter().enumerate() {
            mask.set(i, y, -1.0 / n as f64);
        }
        let mask = tape.constant(mask);
        let logp = tape.log(p).unwrap();
        let picked = tape.mul(logp, mask).unwrap();
        tape.sum(picked)
    }

    /// Per-row `(1/K) Σ |p − q|`.
    fn disc(tape: &mut Tape, p: Tensor, q: Tensor) -> Tensor {
        let k = tape.shape(p).1;
        let d = tape.sub(p, q).unwrap();
        let d = tape.abs(d);
        let d = tape.row_sum(d);
        tape.scale(d, 1.0 / k as f64)
    }

    fn update(&mut self, tape: &Tape, t: &[Tensor], extractor: bool, heads: bool) {
        let ne = self.n_extractor();
        for (i, (p, v)) in self
            .params
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .enumerate()
        {
            if (i < ne && !extractor) || (i >= ne && !heads) {
                continue;
            }
            let g = tape.grad(t[i]);
            for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.mu * *v + g;
                *p -= self.lr * *v;
            }
        }
    }

    pub fn iterate(&mut self, batch: &DomainBatch) {
        let src = &batch.sources[0];
        let xt = &batch.target.features;

        let mut tape = Tape::new();
        let t = self.bind(&mut tape, true, true);
        let (a, b) = self.forward(&mut tape, &t, &src.features);
        let (ca, cb) = (
            Self::ce(&mut tape, a, &src.labels),
            Self::ce(&mut tape, b, &src.labels),
        );
        let loss = tape.add(ca, cb).unwrap();
        tape.backward(loss).unwrap();
        self.update(&tape, &t, true, true);

        let mut tape = Tape::new();
        let t = self.bind(&mut tape, false, true);
        let (a, b) = self.forward(&mut tape, &t, &src.features);
        let (ca, cb) = (
            Self::ce(&mut tape, a, &src.labels),
            Self::ce(&mut tape, b, &src.labels),
        );
        let l_src = tape.add(ca, cb).unwrap();
        let (a, b) = self.forward(&mut tape, &t, xt);
        let d = Self::disc(&mut tape, a, b);
        let l_intra = tape.mean(d);
        let loss = tape.sub(l_src, l_intra).unwrap();
        tape.backward(loss).unwrap();
        self.update(&tape, &t, false, true);

        // A single domain has no inter-domain pairs, so the extractor sees L_intra alone.
        let _ = self.alpha;
        let mut tape = Tape::new();
        let t = self.bind(&mut tape, true, false);
        let (a, b) = self.forward(&mut tape, &t, xt);
        let d = Self::disc(&mut tape, a, b);
        let loss = tape.mean(d);
        tape.backward(loss).unwrap();
        self.update(&tape, &t, true, false);

        let mut tape = Tape::new();
        let t = self.bind(&mut tape, true, true);
        let (a, b) = self.forward(&mut tape, &t, xt);
        let d = Self::disc(&mut tape, a, b);
        let dv = tape.value(d).data().to_vec();
        self.sum += dv.iter().sum::<f64>();
        self.count += dv.len() as f64;
        let bar = self.sum / self.count;
        let (pa, pb) = (tape.value(a).clone(), tape.value(b).clone());
        let n = dv.len();
        let pseudo = pa.zip_map(&pb, |x, y| (x + y) / 2.0);
        let mut beta_log_pseudo = Matrix::zeros(n, pa.cols());
        let mut beta = Matrix::zeros(n, pa.cols());
        for i in 0..n {
            let w = 1.0 / (dv[i] + self.lambda * bar).max(1e-8);
            let bi = bar * w;
            for c in 0..pa.cols() {
                beta.set(i, c, bi / n as f64);
                beta_log_pseudo.set(i, c, pseudo.get(i, c).max(1e-12).ln());
            }
        }
        let log_p = tape.constant(beta_log_pseudo);
        let beta = tape.constant(beta);
        let mut total = None;
        for p in [a, b] {
            let lp = tape.log(p).unwrap();
            let diff = tape.sub(lp, log_p).unwrap();
            let kl = tape.mul(p, diff).unwrap();
            let weighted = tape.mul(kl, beta).unwrap();
            let s = tape.sum(weighted);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s).unwrap(),
            });
        }
        let loss = total.unwrap();
        tape.backward(loss).unwrap();
        self.update(&tape, &t, true, true);
    }

    pub fn max_diff(&self, model: &CrmaModel) -> f64 {
        self.params
            .iter()
            .zip(model.params())
            .flat_map(|(x, (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    }
}

/// Criterion 6a: worst parameter gap between the trainer with one source and
/// the direct variant after each of 5 iterations.
pub fn single_source_gaps(seed: u64) -> Vec<f64> {
    let task = generate_task(&TaskSpec {
        samples_per_domain: 200,
        source_shifts: vec![crma_core::ShiftSpec::rotated(2, 10.0, 0.1)],
        seed,
        ..TaskSpec::default_benchmark()
    })
    .unwrap();
    let config = small_config(seed);
    let arch = config.architecture(task.dim(), 1, task.num_classes);
    let mut trainer = Trainer::new(config.clone(), arch).unwrap();
    let mut direct = DirectSingleSource::new(trainer.model(), &config);
    let mut sampler = crma_core::data::BatchSampler::seeded(
        &task.sources,
        &task.target,
        config.batch_per_domain,
        seed,
    )
    .unwrap();
    (0..5)
        .map(|_| {
            let batch = sampler.next_batch();
            trainer.iterate(&batch).unwrap();
            direct.iterate(&batch);
            direct.max_diff(trainer.model())
        })
        .collect()
}

/// Criterion 6b: every-ablation-off `train` against a plain source-only loop,
/// compared bit for bit.
pub fn source_only_identical(seed: u64) -> bool {
    let task = small_task(160, seed);
    let config = TrainConfig {
        ablation: Ablation::SOURCE_ONLY,
        ..small_config(seed)
    };
    let run = train(&config, &task).unwrap();

    let arch = config.architecture(task.dim(), task.num_sources(), task.num_classes);
    let mut model = CrmaModel::new(
        arch,
        &mut crma_core::rng::substream(seed, crma_core::rng::Stream::Init),
    )
    .unwrap();
    let mut velocity: Vec<Matrix> = model
        .params()
        .iter()
        .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    let mut sampler = crma_core::data::BatchSampler::seeded(
        &task.sources,
        &task.target,
        config.batch_per_domain,
        seed,
    )
    .unwrap();
    let per_epoch = sampler.batches_per_epoch();
    let mut accs = Vec::new();
    for _ in 0..config.epochs {
        for _ in 0..per_epoch {
            let batch = sampler.next_batch();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, Trainable::ALL);
            let mut preds = Vec::new();
            for (d, s) in batch.sources.iter().enumerate() {
                let x = tape.constant(s.features.clone());
                let f = bound.forward_features(&mut tape, x).unwrap();
                preds.push(bound.predict_pair(&mut tape, d, f).unwrap());
            }
            let labels: Vec<&[usize]> = batch.sources.iter().map(|s| s.labels.as_slice()).collect();
            let loss = losses::source_ce_loss(&mut tape, &preds, &labels).unwrap();
            tape.backward(loss).unwrap();
            let grads = bound.gradients(&tape);
            for (((_, p), v), g) in model
                .params_mut()
                .into_iter()
                .zip(velocity.iter_mut())
                .zip(&grads)
            {
                for ((p, v), g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *v = 0.9 * *v + g;
                    *p -= config.base_lr * *v;
                }
            }
        }
        let (_, predicted) = model.final_prediction(&task.target_test.features).unwrap();
        let labels = task.target_test.labels.as_ref().unwrap();
        let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
        accs.push(hits as f64 / labels.len() as f64);
    }
    let same_params =
        model
            .params()
            .iter()
            .zip(run.trainer.model().params())
            .all(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
    let same_acc = accs
        .iter()
        .zip(&run.history)
        .all(|(a, e)| a.to_bits() == e.target_acc.to_bits());
    same_params
        && same_acc
        && run
            .history
            .iter()
            .all(|e| e.l_intra == 0.0 && e.l_inter == 0.0 && e.l_ast == 0.0)
}

// ---------------------------------------------------------------------------
// Determinism and checkpoints

/// Criterion 7 (core part): two runs produce the same metrics CSV.
pub fn metrics_deterministic(seed: u64) -> bool {
    let task = small_task(160, seed);
    let config = small_config(seed);
    let a = metrics_csv(&train(&config, &task).unwrap().history);
    let b = metrics_csv(&train(&config, &task).unwrap().history);
    a == b
}

/// Criterion 7 (core part): save, load, save again gives identical bytes;
/// evaluation and further training match the original trainer.
pub fn checkpoint_round_trip(seed: u64) -> bool {
    let task = small_task(160, seed);
    let config = small_config(seed);
    let run = train(&config, &task).unwrap();
    let mut original = run.trainer;
    let mut bytes = Vec::new();
    original.write_to(&mut bytes).unwrap();
    let mut loaded = Trainer::read_from(&bytes, config.clone()).unwrap();
    let mut again = Vec::new();
    loaded.write_to(&mut again).unwrap();
    if bytes != again {
        return false;
    }
    let e1 = original.evaluate(&task.target_test).unwrap();
    let e2 = loaded.evaluate(&task.target_test).unwrap();
    if e1 != e2 {
        return false;
    }
    let mut sampler = crma_core::data::BatchSampler::seeded(
        &task.sources,
        &task.target,
        config.batch_per_domain,
        seed + 1,
    )
    .unwrap();
    for _ in 0..3 {
        let batch = sampler.next_batch();
        if original.iterate(&batch).unwrap() != loaded.iterate(&batch).unwrap() {
            return false;
        }
    }
    max_param_diff(original.model(), loaded.model()) == 0.0
        && original.tracker() == loaded.tracker()
}

// ---------------------------------------------------------------------------
// Tracker replay

/// Criterion 8: drives the four phases by hand for `epochs` epochs, recording
/// the per-sample discrepancies the self-training phase sees, and returns the
/// worst gap between the tracker's means and a full-history replay, checked
/// after every epoch.
pub fn tracker_replay_gap(seed: u64, epochs: usize) -> f64 {
    let task = small_task(120, seed);
    let config = small_config(seed);
    let arch = config.architecture(task.dim(), task.num_sources(), task.num_classes);
    let mut trainer = Trainer::new(config.clone(), arch).unwrap();
    let mut sampler = crma_core::data::BatchSampler::seeded(
        &task.sources,
        &task.target,
        config.batch_per_domain,
        seed,
    )
    .unwrap();
    let m = task.num_sources();
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut worst = 0.0f64;
    for epoch in 0..epochs {
        trainer.begin_epoch(epoch);
        for _ in 0..sampler.batches_per_epoch() {
            let batch = sampler.next_batch();
            trainer.step_source(&batch).unwrap();
            trainer.step_classifiers(&batch).unwrap();
            trainer.step_extractor(&batch).unwrap();
            for (d, col) in per_sample_discrepancy(trainer.model(), &batch)
                .into_iter()
                .enumerate()
            {
                history[d].extend(col);
            }
            trainer.step_ast(&batch).unwrap();
        }
        let means = trainer.tracker().means();
        for (d, values) in history.iter().enumerate() {
            let mut s = 0.0;
            for v in values {
                s += v;
            }
            worst = worst.max((means[d] - s / values.len() as f64).abs());
        }
    }
    worst
}

/// Explicit `d(p_m^a, p_m^b)` per domain, per target row.
pub fn per_sample_discrepancy(model: &CrmaModel, batch: &DomainBatch) -> Vec<Vec<f64>> {
    let (probs, _) = head_probs(model, &batch.target.features);
    (0..model.num_domains())
        .map(|d| {
            (0..batch.target.features.rows())
                .map(|i| oracle::discrepancy(probs[2 * d].row(i), probs[2 * d + 1].row(i)))
                .collect()
        })
        .collect()
}

/// Probabilities of every head (index `2m + branch`) computed with explicit
/// loops, and the final averaged prediction.
pub fn head_probs(model: &CrmaModel, x: &Matrix) -> (Vec<Matrix>, Matrix) {
    let dense = |input: &Matrix, w: &Matrix, b: &Matrix, relu: bool| {
        let mut out = Matrix::zeros(input.rows(), w.cols());
        for i in 0..input.rows() {
            for j in 0..w.cols() {
                let mut s = b.get(0, j);
                for k in 0..w.rows() {
                    s += input.get(i, k) * w.get(k, j);
                }
                out.set(i, j, if relu { s.max(0.0) } else { s });
            }
        }
        out
    };
    let mut h = x.clone();
    for l in &model.extractor().layers {
        h = dense(&h, &l.weight, &l.bias, true);
    }
    let k = model.num_classes();
    let mut heads = Vec::new();
    let mut avg = Matrix::zeros(x.rows(), k);
    for d in 0..model.num_domains() {
        for branch in Branch::BOTH {
            let head = model.head(d, branch).unwrap();
            let mut z = h.clone();
            for (i, l) in head.layers.iter().enumerate() {
                z = dense(&z, &l.weight, &l.bias, i + 1 < head.layers.len());
            }
            let mut p = Matrix::zeros(x.rows(), k);
            for r in 0..x.rows() {
                p.row_mut(r).copy_from_slice(&oracle::softmax(z.row(r)));
                for c in 0..k {
                    avg.set(
                        r,
                        c,
                        avg.get(r, c) + p.get(r, c) / (2 * model.num_domains()) as f64,
                    );
                }
            }
            heads.push(p);
        }
    }
    (heads, avg)
}

// ---------------------------------------------------------------------------
// Formula oracles

/// Worst gap per formula (`domain_weights`, `pseudo_label`, `ast_beta`,
/// `kl_divergence`, `discrepancy`) over `trials` random inputs each. Raw
/// weights are compared relative to their magnitude.
pub fn formula_gaps(seed: u64, trials: usize) -> [f64; 5] {
    let mut rng = rng(seed);
    let mut worst = [0.0f64; 5];
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    for _ in 0..trials {
        let m = rng.random_range(1..=5);
        let k = rng.random_range(2..=6);
        let d: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random_bool(0.05) {
                    0.0
                } else {
                    rng.random_range(0.0..2.0 / k as f64)
                }
            })
            .collect();
        let means: Vec<f64> = (0..m)
            .map(|_| {
                if rng.random_bool(0.05) {
                    0.0
                } else {
                    rng.random_range(0.0..0.5)
                }
            })
            .collect();
        let lambda = rng.random_range(0.0..1.0);

        let got = losses::domain_weights(&d, &means, lambda).unwrap();
        let (raw, norm) = oracle::domain_weights(&d, &means, lambda);
        for (a, b) in got
            .raw
            .iter()
            .zip(&raw)
            .chain(got.normalized.iter().zip(&norm))
        {
            worst[0] = worst[0].max(rel(*a, *b));
        }

        let preds: Vec<Vec<f64>> = (0..m).map(|_| random_prob_vec(&mut rng, k)).collect();
        let slices: Vec<&[f64]> = preds.iter().map(Vec::as_slice).collect();
        let p = losses::pseudo_label(&slices, &got).unwrap();
        for (a, b) in p.iter().zip(oracle::pseudo_label(&preds, &norm)) {
            worst[1] = worst[1].max((a - b).abs());
        }

        worst[2] = worst[2].max(rel(
            losses::ast_beta(&got.raw, &means),
            oracle::ast_beta(&raw, &means),
        ));

        let (x, y) = (random_prob_vec(&mut rng, k), random_prob_vec(&mut rng, k));
        worst[3] = worst[3].max((losses::kl_divergence(&x, &y) - oracle::kl(&x, &y)).abs());
        worst[4] = worst[4]
            .max((losses::discrepancy(&x, &y).unwrap() - oracle::discrepancy(&x, &y)).abs());
    }
    worst
}

/// The hand-worked examples. Returns the first mismatch.
pub fn hand_cases() -> Result<(), String> {
    let near = |what: &str, a: f64, b: f64, tol: f64| {
        if (a - b).abs() <= tol {
            Ok(())
        } else {
            Err(format!("{what}: got {a}, expected {b}"))
        }
    };
    let w = losses::domain_weights(&[0.1, 0.4], &[0.2, 0.2], 0.1).map_err(|e| e.to_string())?;
    near("raw w_1", w.raw[0], 1.0 / 0.12, 1e-12)?;
    near("raw w_2", w.raw[1], 1.0 / 0.42, 1e-12)?;
    near("raw w_1 (4 dp)", w.raw[0], 8.3333, 5e-5)?;
    near("raw w_2 (4 dp)", w.raw[1], 2.3810, 5e-5)?;
    near("normalized w_1", w.normalized[0], 0.7778, 5e-5)?;
    near("normalized w_2", w.normalized[1], 0.2222, 5e-5)?;
    let beta = losses::ast_beta(&[1.0 / 0.12, 1.0 / 0.42], &[0.2, 0.3]);
    near("beta", beta, 0.2 * (1.0 / 0.12 + 1.0 / 0.42), 1e-12)?;
    near("beta (4 dp)", beta, 2.1429, 5e-5)?;
    near(
        "beta with zero means",
        losses::ast_beta(&[3.0, 4.0], &[0.0, 0.0]),
        0.0,
        0.0,
    )?;
    near(
        "KL([1,0] || [.5,.5])",
        losses::kl_divergence(&[1.0, 0.0], &[0.5, 0.5]),
        std::f64::consts::LN_2,
        1e-12,
    )?;
    let d = losses::discrepancy(&[0.5, 0.3, 0.2], &[0.2, 0.3, 0.5]).map_err(|e| e.to_string())?;
    near("d(K=3 example)", d, 0.2, 1e-12)?;
    let d = losses::discrepancy(&[1.0, 0.0], &[0.0, 1.0]).map_err(|e| e.to_string())?;
    near("d(one-hot opposites)", d, 1.0, 0.0)?;
    let u = losses::DomainWeights::uniform(2);
    let p = losses::pseudo_label(&[&[1.0, 0.0], &[0.0, 1.0]], &u).map_err(|e| e.to_string())?;
    near("uniform pseudo label", p[0], 0.5, 0.0)?;
    let w = losses::domain_weights(&[0.0, 0.3], &[0.1, 0.1], 0.0).map_err(|e| e.to_string())?;
    near("floored domain dominates", w.normalized[0], 1.0, 1e-6)?;
    let w = losses::domain_weights(&[0.2, 0.2, 0.2], &[0.1, 0.1, 0.1], 0.1)
        .map_err(|e| e.to_string())?;
    for v in &w.normalized {
        near("symmetric weights", *v, 1.0 / 3.0, 1e-15)?;
    }
    Ok(())
}
