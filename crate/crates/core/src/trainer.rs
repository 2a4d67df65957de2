//! The alternating training loop.
//!
//! Each iteration draws one [`DomainBatch`] and runs four phases on it, in order:
//!
//! 1. **source**: cross-entropy on every source batch, all parameters.
//! 2. **classifiers**: minimize `L_src − L_intra` over the heads only, which
//!    pushes each pair to disagree on target samples it cannot place.
//! 3. **extractor**: minimize `L_intra + α·L_inter` over the extractor only.
//! 4. **self-training**: build per-sample pseudo labels from confidence-weighted
//!    mean predictions and minimize the β-weighted KL loss over all parameters.
//!
//! Every phase does a fresh forward pass on a new tape. Phases 2–4 can be
//! disabled individually through [`Ablation`].

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tape;
use crate::codec::{Reader, Writer};
use crate::data::{BatchSampler, Domain, DomainBatch, Task};
use crate::error::{Error, Result};
use crate::losses::{self, PseudoLabelWeighting};
use crate::matrix::Matrix;
use crate::nn::{argmax_rows, Architecture, BoundModel, CrmaModel, Prediction, Trainable};
use crate::rng::{substream, Stream};

/// Losses above this magnitude count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Cosine schedule floor as a fraction of the base learning rate.
pub const COSINE_FLOOR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheduler {
    Constant,
    CosineAnnealing,
}

/// Which adaptation phases run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub intra_da: bool,
    pub inter_da: bool,
    pub ast: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        intra_da: true,
        inter_da: true,
        ast: true,
    };
    pub const SOURCE_ONLY: Ablation = Ablation {
        intra_da: false,
        inter_da: false,
        ast: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub base_lr: f64,
    pub extractor_lr_multiplier: f64,
    pub epochs: usize,
    pub batch_per_domain: usize,
    pub optimizer: OptimizerKind,
    pub scheduler: Scheduler,
    pub ablation: Ablation,
    pub weighting: PseudoLabelWeighting,
    /// Extractor updates per iteration.
    pub num_extractor_steps: usize,
    /// First epoch (0-based) in which self-training runs.
    pub ast_start_epoch: usize,
    pub extractor_widths: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.1,
            base_lr: 1e-3,
            extractor_lr_multiplier: 1.0,
            epochs: 50,
            batch_per_domain: 128,
            optimizer: OptimizerKind::SgdMomentum(0.9),
            scheduler: Scheduler::Constant,
            ablation: Ablation::FULL,
            weighting: PseudoLabelWeighting::Adaptive,
            num_extractor_steps: 1,
            ast_start_epoch: 0,
            extractor_widths: vec![64, 64],
            head_hidden: vec![32],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::contract(msg.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.base_lr > 0.0) || !(self.extractor_lr_multiplier > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.epochs == 0 || self.batch_per_domain == 0 {
            return bad("epochs and batch_per_domain must be positive");
        }
        if let OptimizerKind::SgdMomentum(mu) = self.optimizer {
            if !(0.0..1.0).contains(&mu) {
                return bad("momentum must lie in [0, 1)");
            }
        }
        Ok(())
    }

    pub fn architecture(
        &self,
        input_dim: usize,
        num_domains: usize,
        num_classes: usize,
    ) -> Architecture {
        Architecture {
            input_dim,
            extractor_widths: self.extractor_widths.clone(),
            head_hidden: self.head_hidden.clone(),
            num_domains,
            num_classes,
        }
    }

    /// Base learning rate for `epoch` under the configured schedule.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.scheduler {
            Scheduler::Constant => self.base_lr,
            Scheduler::CosineAnnealing => {
                let floor = COSINE_FLOOR * self.base_lr;
                let span = self.epochs.saturating_sub(1).max(1) as f64;
                let progress = (epoch as f64 / span).min(1.0);
                floor
                    + 0.5 * (self.base_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Running mean of the per-sample intra-domain discrepancy, one per source domain.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceTracker {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl ConfidenceTracker {
    pub fn new(num_domains: usize) -> Self {
        Self {
            sums: vec![0.0; num_domains],
            counts: vec![0; num_domains],
        }
    }

    /// Adds every row of an `[n×M]` discrepancy matrix, in row order.
    pub fn update(&mut self, per_sample: &Matrix) {
        for row in per_sample.iter_rows() {
            for (m, &d) in row.iter().enumerate() {
                self.sums[m] += d;
                self.counts[m] += 1;
            }
        }
    }

    /// Means so far; zero for a domain with no samples yet.
    pub fn means(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Losses of one iteration. Skipped phases report zero.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationLosses {
    pub l_src: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_ast: f64,
    /// Batch mean of normalized domain weights, when self-training ran.
    pub mean_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_src: f64,
    pub l_intra: f64,
    pub l_inter: f64,
    pub l_ast: f64,
    pub lr: f64,
    pub target_acc: f64,
    pub mean_w: Vec<f64>,
    pub bar_l: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated data.
    pub per_class: Vec<Option<f64>>,
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Matrix, labels: &[usize], num_classes: usize) -> Evaluation {
    let predicted = argmax_rows(probs);
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Evaluation {
        accuracy: correct as f64 / labels.len().max(1) as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    }
}

/// Model, optimizer and tracker state for one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: CrmaModel,
    velocity: Vec<Matrix>,
    tracker: ConfidenceTracker,
    iteration: usize,
    epoch: usize,
    lr: f64,
}

fn check_loss(value: f64, iteration: usize, phase: &'static str) -> Result<f64> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            iteration,
            phase,
            loss: value,
            history: Vec::new(),
        });
    }
    Ok(value)
}

/// Non-finite values inside a phase mean the parameters blew up.
fn numeric_as_divergence(e: Error, iteration: usize, phase: &'static str) -> Error {
    match e {
        Error::Numeric { .. } => Error::Diverged {
            iteration,
            phase,
            loss: f64::NAN,
            history: Vec::new(),
        },
        other => other,
    }
}

impl Trainer {
    /// Fresh model initialized from the seed's init substream.
    pub fn new(config: TrainConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let model = CrmaModel::new(arch, &mut substream(config.seed, Stream::Init))?;
        Self::with_model(config, model)
    }

    pub fn with_model(config: TrainConfig, model: CrmaModel) -> Result<Self> {
        config.validate()?;
        let velocity = model
            .params()
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let tracker = ConfidenceTracker::new(model.num_domains());
        let lr = config.lr_at(0);
        Ok(Self {
            config,
            model,
            velocity,
            tracker,
            iteration: 0,
            epoch: 0,
            lr,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CrmaModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut CrmaModel {
        &mut self.model
    }

    pub fn tracker(&self) -> &ConfidenceTracker {
        &self.tracker
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Sets the epoch counter and its scheduled learning rate.
    pub fn begin_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        self.lr = self.config.lr_at(epoch);
    }

    /// Replaces the current base learning rate (the schedule resets it on the next epoch).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    fn apply(&mut self, grads: &[Matrix], trainable: Trainable) {
        let mult = self.config.extractor_lr_multiplier;
        let (lr, optimizer) = (self.lr, self.config.optimizer);
        for (((group, param), vel), grad) in self
            .model
            .params_mut()
            .into_iter()
            .zip(self.velocity.iter_mut())
            .zip(grads)
        {
            if !trainable.includes(group) {
                continue;
            }
            let step = match group {
                crate::nn::ParamGroup::Extractor => lr * mult,
                crate::nn::ParamGroup::Classifier { .. } => lr,
            };
            match optimizer {
                OptimizerKind::Sgd => {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= step * g;
                    }
                }
                OptimizerKind::SgdMomentum(mu) => {
                    for ((p, v), g) in param
                        .data_mut()
                        .iter_mut()
                        .zip(vel.data_mut())
                        .zip(grad.data())
                    {
                        *v = mu * *v + g;
                        *p -= step * *v;
                    }
                }
            }
        }
    }

    fn source_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        batch: &DomainBatch,
    ) -> Result<crate::autodiff::Tensor> {
        let m = self.model.num_domains();
        if batch.sources.len() != m {
            return Err(Error::contract(format!(
                "batch has {} source domains, model has {m}",
                batch.sources.len()
            )));
        }
        let mut preds = Vec::with_capacity(m);
        for (d, src) in batch.sources.iter().enumerate() {
            let x = tape.constant(src.features.clone());
            let f = bound.forward_features(tape, x)?;
            preds.push(bound.predict_pair(tape, d, f)?);
        }
        let labels: Vec<&[usize]> = batch.sources.iter().map(|s| s.labels.as_slice()).collect();
        losses::source_ce_loss(tape, &preds, &labels)
    }

    fn target_forward(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        batch: &DomainBatch,
    ) -> Result<Vec<(Prediction, Prediction)>> {
        let x = tape.constant(batch.target.features.clone());
        let f = bound.forward_features(tape, x)?;
        bound.predict_all(tape, f)
    }

    /// Source cross-entropy step on all parameters. Returns the pre-step loss.
    pub fn step_source(&mut self, batch: &DomainBatch) -> Result<f64> {
        let iteration = self.iteration;
        self.step_source_inner(batch)
            .map_err(|e| numeric_as_divergence(e, iteration, "source"))
    }

    fn step_source_inner(&mut self, batch: &DomainBatch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, Trainable::ALL);
        let loss = self.source_forward(&mut tape, &bound, batch)?;
        let value = check_loss(tape.item(loss), self.iteration, "source")?;
        tape.backward(loss)?;
        self.apply(&bound.gradients(&tape), Trainable::ALL);
        Ok(value)
    }

    /// Classifier-only step on `L_src − L_intra`. Returns pre-step `(L_src, L_intra)`,
    /// or `None` when intra-domain alignment is disabled.
    pub fn step_classifiers(&mut self, batch: &DomainBatch) -> Result<Option<(f64, f64)>> {
        let iteration = self.iteration;
        self.step_classifiers_inner(batch)
            .map_err(|e| numeric_as_divergence(e, iteration, "classifiers"))
    }

    fn step_classifiers_inner(&mut self, batch: &DomainBatch) -> Result<Option<(f64, f64)>> {
        if !self.config.ablation.intra_da {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, Trainable::CLASSIFIERS);
        let l_src = self.source_forward(&mut tape, &bound, batch)?;
        let pairs = self.target_forward(&mut tape, &bound, batch)?;
        let intra = losses::intra_consistency_loss(&mut tape, &pairs)?;
        let objective = losses::classifier_objective(&mut tape, l_src, intra.loss)?;
        check_loss(tape.item(objective), self.iteration, "classifiers")?;
        let values = (tape.item(l_src), tape.item(intra.loss));
        tape.backward(objective)?;
        self.apply(&bound.gradients(&tape), Trainable::CLASSIFIERS);
        Ok(Some(values))
    }

    /// Extractor-only step(s) on `L_intra + α·L_inter`, dropping disabled terms.
    /// Returns the first step's pre-step `(L_intra, L_inter)`, or `None` when skipped.
    pub fn step_extractor(&mut self, batch: &DomainBatch) -> Result<Option<(f64, f64)>> {
        let iteration = self.iteration;
        self.step_extractor_inner(batch)
            .map_err(|e| numeric_as_divergence(e, iteration, "extractor"))
    }

    fn step_extractor_inner(&mut self, batch: &DomainBatch) -> Result<Option<(f64, f64)>> {
        let ab = self.config.ablation;
        if !ab.intra_da && !ab.inter_da {
            return Ok(None);
        }
        let mut first = None;
        for _ in 0..self.config.num_extractor_steps.max(1) {
            let mut tape = Tape::new();
            let bound = self.model.bind(&mut tape, Trainable::EXTRACTOR);
            let pairs = self.target_forward(&mut tape, &bound, batch)?;
            let intra = losses::intra_consistency_loss(&mut tape, &pairs)?;
            let means = losses::mean_predictions(&mut tape, &pairs)?;
            let inter = losses::inter_consistency_loss(&mut tape, &means)?;
            let values = (tape.item(intra.loss), tape.item(inter));
            let objective = match (ab.intra_da, ab.inter_da) {
                (true, true) => {
                    losses::extractor_objective(&mut tape, intra.loss, inter, self.config.alpha)?
                }
                (true, false) => intra.loss,
                _ => tape.scale(inter, self.config.alpha),
            };
            check_loss(tape.item(objective), self.iteration, "extractor")?;
            first.get_or_insert(values);
            if !tape.requires_grad(objective) {
                // Identically zero objective (one domain, inter-domain term only).
                break;
            }
            tape.backward(objective)?;
            self.apply(&bound.gradients(&tape), Trainable::EXTRACTOR);
        }
        Ok(first)
    }

    /// Self-training step on all parameters: updates the tracker with this
    /// batch's per-sample discrepancies, then weights pseudo labels with the
    /// updated means. Returns the loss and batch-mean normalized weights.
    pub fn step_ast(&mut self, batch: &DomainBatch) -> Result<Option<(f64, Vec<f64>)>> {
        let iteration = self.iteration;
        self.step_ast_inner(batch)
            .map_err(|e| numeric_as_divergence(e, iteration, "self-training"))
    }

    fn step_ast_inner(&mut self, batch: &DomainBatch) -> Result<Option<(f64, Vec<f64>)>> {
        if !self.config.ablation.ast || self.epoch < self.config.ast_start_epoch {
            return Ok(None);
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, Trainable::ALL);
        let pairs = self.target_forward(&mut tape, &bound, batch)?;
        let intra = losses::intra_consistency_loss(&mut tape, &pairs)?;
        let means = losses::mean_predictions(&mut tape, &pairs)?;

        self.tracker.update(&intra.per_sample);
        let running = self.tracker.means();
        let mean_values: Vec<&Matrix> = means.iter().map(|&t| tape.value(t)).collect();
        let pseudo = losses::build_pseudo_labels(
            &intra.per_sample,
            &mean_values,
            &running,
            self.config.lambda,
            self.config.weighting,
        )?;

        let loss = losses::ast_loss(&mut tape, &pairs, &pseudo.probs, &pseudo.beta)?;
        let value = check_loss(tape.item(loss), self.iteration, "self-training")?;
        tape.backward(loss)?;
        self.apply(&bound.gradients(&tape), Trainable::ALL);

        let n = pseudo.weights.rows().max(1) as f64;
        let mut mean_w = vec![0.0; pseudo.weights.cols()];
        for row in pseudo.weights.iter_rows() {
            for (acc, w) in mean_w.iter_mut().zip(row) {
                *acc += w / n;
            }
        }
        Ok(Some((value, mean_w)))
    }

    /// All four phases on one batch.
    pub fn iterate(&mut self, batch: &DomainBatch) -> Result<IterationLosses> {
        let mut out = IterationLosses {
            l_src: self.step_source(batch)?,
            ..Default::default()
        };
        if let Some((_, intra)) = self.step_classifiers(batch)? {
            out.l_intra = intra;
        }
        if let Some((intra, inter)) = self.step_extractor(batch)? {
            out.l_intra = intra;
            out.l_inter = inter;
        }
        if let Some((loss, w)) = self.step_ast(batch)? {
            out.l_ast = loss;
            out.mean_weights = Some(w);
        }
        self.iteration += 1;
        Ok(out)
    }

    pub fn evaluate(&self, domain: &Domain) -> Result<Evaluation> {
        let labels = domain
            .labels
            .as_ref()
            .ok_or_else(|| Error::contract(format!("domain {} has no labels", domain.name)))?;
        let (probs, _) = self.model.final_prediction(&domain.features)?;
        Ok(accuracy(&probs, labels, self.model.num_classes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Model checkpoint followed by:
    ///
    /// ```text
    /// magic "CRMASTAT" | version u32 | iteration u64 | epoch u64 | lr f64
    /// | velocity count u32 | matrices | M u32 | M × sum f64 | M × count u64
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        self.model.write_to(w)?;
        let mut out = Writer::new(w);
        out.bytes(STATE_MAGIC)?;
        out.u32(STATE_VERSION)?;
        out.u64(self.iteration as u64)?;
        out.u64(self.epoch as u64)?;
        out.f64(self.lr)?;
        out.u32(self.velocity.len() as u32)?;
        for v in &self.velocity {
            out.matrix(v)?;
        }
        out.u32(self.tracker.sums.len() as u32)?;
        out.f64s(&self.tracker.sums)?;
        for &c in &self.tracker.counts {
            out.u64(c)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: TrainConfig) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes, config)
    }

    pub fn read_from(bytes: &[u8], config: TrainConfig) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let model = CrmaModel::read_from(&mut r)?;
        let mut trainer = Self::with_model(config, model)?;
        r.expect_magic(STATE_MAGIC)?;
        r.expect_version(STATE_VERSION)?;
        trainer.iteration = r.u64()? as usize;
        trainer.epoch = r.u64()? as usize;
        trainer.lr = r.f64()?;
        let offset = r.offset();
        if r.u32()? as usize != trainer.velocity.len() {
            return Err(Error::Format {
                offset,
                detail: "optimizer state does not match the model".into(),
            });
        }
        for v in trainer.velocity.iter_mut() {
            let offset = r.offset();
            let m = r.matrix()?;
            if m.shape() != v.shape() {
                return Err(Error::Format {
                    offset,
                    detail: "optimizer buffer shape mismatch".into(),
                });
            }
            *v = m;
        }
        let offset = r.offset();
        let m = r.u32()? as usize;
        if m != trainer.model.num_domains() {
            return Err(Error::Format {
                offset,
                detail: format!("tracker has {m} domains"),
            });
        }
        trainer.tracker.sums = r.f64s(m)?;
        trainer.tracker.counts = (0..m).map(|_| r.u64()).collect::<Result<_>>()?;
        if !r.is_at_end() {
            return Err(Error::Format {
                offset: r.offset(),
                detail: "trailing bytes".into(),
            });
        }
        Ok(trainer)
    }
}

const STATE_MAGIC: &[u8; 8] = b"CRMASTAT";
const STATE_VERSION: u32 = 1;

/// A finished run.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub trainer: Trainer,
    pub history: Vec<EpochMetrics>,
}

/// Runs `config.epochs` epochs over `task`. On divergence the returned
/// [`Error::Diverged`] carries the completed epochs.
pub fn train(config: &TrainConfig, task: &Task) -> Result<TrainRun> {
    let arch = config.architecture(task.dim(), task.num_sources(), task.num_classes);
    let mut trainer = Trainer::new(config.clone(), arch)?;
    let mut sampler = BatchSampler::seeded(
        &task.sources,
        &task.target,
        config.batch_per_domain,
        config.seed,
    )?;
    let per_epoch = sampler.batches_per_epoch();
    let m = task.num_sources();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        trainer.begin_epoch(epoch);
        let mut sums = IterationLosses::default();
        let mut weight_sums = vec![0.0; m];
        let mut weighted_steps = 0usize;
        for _ in 0..per_epoch {
            let batch = sampler.next_batch();
            let losses = match trainer.iterate(&batch) {
                Ok(l) => l,
                Err(Error::Diverged {
                    iteration,
                    phase,
                    loss,
                    ..
                }) => {
                    return Err(Error::Diverged {
                        iteration,
                        phase,
                        loss,
                        history,
                    })
                }
                Err(e) => return Err(e),
            };
            sums.l_src += losses.l_src;
            sums.l_intra += losses.l_intra;
            sums.l_inter += losses.l_inter;
            sums.l_ast += losses.l_ast;
            if let Some(w) = losses.mean_weights {
                weighted_steps += 1;
                for (acc, v) in weight_sums.iter_mut().zip(w) {
                    *acc += v;
                }
            }
        }
        let k = per_epoch as f64;
        history.push(EpochMetrics {
            epoch,
            l_src: sums.l_src / k,
            l_intra: sums.l_intra / k,
            l_inter: sums.l_inter / k,
            l_ast: sums.l_ast / k,
            lr: trainer.lr(),
            target_acc: trainer.evaluate(&task.target_test)?.accuracy,
            mean_w: weight_sums
                .iter()
                .map(|s| {
                    if weighted_steps == 0 {
                        0.0
                    } else {
                        s / weighted_steps as f64
                    }
                })
                .collect(),
            bar_l: trainer.tracker().means(),
        });
        log::debug!("epoch {epoch}: {:?}", history.last());
    }
    Ok(TrainRun { trainer, history })
}

/// Header of the metrics CSV for `m` source domains.
pub fn metrics_header(m: usize) -> String {
    let mut h = String::from("epoch,L_src,L_intra,L_inter,L_AST,lr,target_acc");
    for i in 0..m {
        write!(h, ",mean_w_{i}").unwrap();
    }
    for i in 0..m {
        write!(h, ",bar_L_{i}").unwrap();
    }
    h
}

/// Metrics CSV. Floats use Rust's shortest round-trip formatting, so parsing
/// the file back reproduces every value bit-exactly.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let m = history.first().map_or(0, |e| e.mean_w.len());
    let mut out = metrics_header(m);
    out.push('\n');
    for e in history {
        write!(
            out,
            "{},{},{},{},{},{},{}",
            e.epoch, e.l_src, e.l_intra, e.l_inter, e.l_ast, e.lr, e.target_acc
        )
        .unwrap();
        for v in e.mean_w.iter().chain(&e.bar_l) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::contract("empty metrics file"))?;
    let cols = header.split(',').count();
    if cols < 7 || (cols - 7) % 2 != 0 {
        return Err(Error::contract(format!(
            "unexpected metrics header: {header}"
        )));
    }
    let m = (cols - 7) / 2;
    if header != metrics_header(m) {
        return Err(Error::contract(format!(
            "unexpected metrics header: {header}"
        )));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(Error::contract(format!(
                    "metrics row {} has {} fields",
                    i + 1,
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| {
                    Error::contract(format!("metrics row {}: bad number {s:?}", i + 1))
                })
            };
            let floats = fields[1..]
                .iter()
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            Ok(EpochMetrics {
                epoch: fields[0]
                    .parse()
                    .map_err(|_| Error::contract(format!("metrics row {}: bad epoch", i + 1)))?,
                l_src: floats[0],
                l_intra: floats[1],
                l_inter: floats[2],
                l_ast: floats[3],
                lr: floats[4],
                target_acc: floats[5],
                mean_w: floats[6..6 + m].to_vec(),
                bar_l: floats[6 + m..].to_vec(),
            })
        })
        .collect()
}
