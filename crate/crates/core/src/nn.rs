//! Shared feature extractor with `M` pairs of domain-specific classifier heads.
//!
//! Parameters live in plain [`Matrix`] storage on the [`CrmaModel`]. A forward
//! pass first [`binds`](CrmaModel::bind) the model onto a fresh [`Tape`], which
//! records each parameter as a leaf; gradients are read back with
//! [`BoundModel::gradients`] in the model's canonical parameter order.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    A,
    B,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::A, Branch::B];

    pub fn index(self) -> usize {
        match self {
            Branch::A => 0,
            Branch::B => 1,
        }
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Extractor,
    Classifier { domain: usize, branch: Branch },
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub extractor: bool,
    pub classifiers: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable {
        extractor: true,
        classifiers: true,
    };
    pub const NONE: Trainable = Trainable {
        extractor: false,
        classifiers: false,
    };
    pub const EXTRACTOR: Trainable = Trainable {
        extractor: true,
        classifiers: false,
    };
    pub const CLASSIFIERS: Trainable = Trainable {
        extractor: false,
        classifiers: true,
    };

    pub fn includes(self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Extractor => self.extractor,
            ParamGroup::Classifier { .. } => self.classifiers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the extractor's layers; the last is the feature dimension.
    pub extractor_widths: Vec<usize>,
    /// Hidden widths of every classifier head (output width is `num_classes`).
    pub head_hidden: Vec<usize>,
    pub num_domains: usize,
    pub num_classes: usize,
}

impl Architecture {
    /// Extractor of two 64-wide relu layers, heads with one 32-wide hidden layer.
    pub fn desk_scale(input_dim: usize, num_domains: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            extractor_widths: vec![64, 64],
            head_hidden: vec![32],
            num_domains,
            num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor_widths
            .last()
            .copied()
            .unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 1 {
            return Err(Error::contract("model needs at least one source domain"));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("model needs at least two classes"));
        }
        if self.input_dim == 0
            || self.extractor_widths.contains(&0)
            || self.head_hidden.contains(&0)
        {
            return Err(Error::contract("layer widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in × fan_out]`
    pub weight: Matrix,
    /// `[1 × fan_out]`
    pub bias: Matrix,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }
}

/// Stack of linear layers, each followed by relu.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

/// Linear layers with relu between them and a linear `K`-wide output.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub layers: Vec<Linear>,
    pub domain: usize,
    pub branch: Branch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrmaModel {
    arch: Architecture,
    extractor: FeatureExtractor,
    /// Indexed `2 * domain + branch`.
    heads: Vec<ClassifierHead>,
}

fn layer_dims(input: usize, widths: &[usize]) -> Vec<(usize, usize)> {
    let mut prev = input;
    widths
        .iter()
        .map(|&w| {
            let d = (prev, w);
            prev = w;
            d
        })
        .collect()
}

impl CrmaModel {
    /// Seeded Glorot initialization. Layers are drawn in canonical parameter order.
    pub fn new(arch: Architecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(arch, |i, o| Linear::glorot(i, o, rng))
    }

    /// Every weight and bias zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::build(arch, Linear::zeros)
    }

    fn build(arch: Architecture, mut make: impl FnMut(usize, usize) -> Linear) -> Result<Self> {
        arch.validate()?;
        let extractor = FeatureExtractor {
            layers: layer_dims(arch.input_dim, &arch.extractor_widths)
                .into_iter()
                .map(|(i, o)| make(i, o))
                .collect(),
        };
        let mut head_widths = arch.head_hidden.clone();
        head_widths.push(arch.num_classes);
        let mut heads = Vec::with_capacity(2 * arch.num_domains);
        for domain in 0..arch.num_domains {
            for branch in Branch::BOTH {
                heads.push(ClassifierHead {
                    layers: layer_dims(arch.feature_dim(), &head_widths)
                        .into_iter()
                        .map(|(i, o)| make(i, o))
                        .collect(),
                    domain,
                    branch,
                });
            }
        }
        Ok(Self {
            arch,
            extractor,
            heads,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_domains(&self) -> usize {
        self.arch.num_domains
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn extractor_mut(&mut self) -> &mut FeatureExtractor {
        &mut self.extractor
    }

    pub fn head(&self, domain: usize, branch: Branch) -> Result<&ClassifierHead> {
        self.check_domain(domain)?;
        Ok(&self.heads[2 * domain + branch.index()])
    }

    pub fn head_mut(&mut self, domain: usize, branch: Branch) -> Result<&mut ClassifierHead> {
        self.check_domain(domain)?;
        Ok(&mut self.heads[2 * domain + branch.index()])
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.arch.num_domains {
            return Err(Error::Index {
                index: domain,
                len: self.arch.num_domains,
            });
        }
        Ok(())
    }

    /// All parameters in canonical order: extractor layers (weight, bias), then
    /// heads `(0,a), (0,b), (1,a), ...` each layer (weight, bias).
    pub fn params(&self) -> Vec<(ParamGroup, &Matrix)> {
        let mut out = Vec::new();
        for l in &self.extractor.layers {
            out.push((ParamGroup::Extractor, &l.weight));
            out.push((ParamGroup::Extractor, &l.bias));
        }
        for h in &self.heads {
            let g = ParamGroup::Classifier {
                domain: h.domain,
                branch: h.branch,
            };
            for l in &h.layers {
                out.push((g, &l.weight));
                out.push((g, &l.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamGroup, &mut Matrix)> {
        let mut out = Vec::new();
        for l in &mut self.extractor.layers {
            out.push((ParamGroup::Extractor, &mut l.weight));
            out.push((ParamGroup::Extractor, &mut l.bias));
        }
        for h in &mut self.heads {
            let g = ParamGroup::Classifier {
                domain: h.domain,
                branch: h.branch,
            };
            for l in &mut h.layers {
                out.push((g, &mut l.weight));
                out.push((g, &mut l.bias));
            }
        }
        out
    }

    /// Records every parameter on `tape`; groups outside `trainable` become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: Trainable) -> BoundModel {
        let mut bind_layers = |layers: &[Linear], rg: bool| -> Vec<(Tensor, Tensor)> {
            layers
                .iter()
                .map(|l| {
                    (
                        tape.leaf(l.weight.clone(), rg),
                        tape.leaf(l.bias.clone(), rg),
                    )
                })
                .collect()
        };
        let extractor = bind_layers(&self.extractor.layers, trainable.extractor);
        let heads = self
            .heads
            .iter()
            .map(|h| bind_layers(&h.layers, trainable.classifiers))
            .collect();
        BoundModel {
            arch: self.arch.clone(),
            extractor,
            heads,
        }
    }

    /// Features of `x` without recording gradients.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let xt = tape.constant(x.clone());
        let f = bound.forward_features(&mut tape, xt)?;
        Ok(tape.value(f).clone())
    }

    /// Average of all `2M` heads' probabilities, with per-row argmax labels.
    pub fn final_prediction(&self, x: &Matrix) -> Result<(Matrix, Vec<usize>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, Trainable::NONE);
        let xt = tape.constant(x.clone());
        let probs = bound.final_prediction(&mut tape, xt)?;
        let probs = tape.value(probs).clone();
        let labels = argmax_rows(&probs);
        Ok((probs, labels))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut r = Reader::new(&bytes);
        Self::read_from(&mut r)
    }

    /// Binary checkpoint, little-endian:
    ///
    /// ```text
    /// magic "CRMAMODL" | version u32 | M u32 | K u32 | input_dim u32
    /// | n_ext u32 | n_ext × width u32 | n_head u32 | n_head × width u32
    /// | parameter count u32 | per parameter: rows u32, cols u32, rows*cols × f64
    /// ```
    ///
    /// Parameters follow [`CrmaModel::params`] order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut out = Writer::new(w);
        out.bytes(MODEL_MAGIC)?;
        out.u32(MODEL_VERSION)?;
        out.u32(self.arch.num_domains as u32)?;
        out.u32(self.arch.num_classes as u32)?;
        out.u32(self.arch.input_dim as u32)?;
        out.u32(self.arch.extractor_widths.len() as u32)?;
        for &w in &self.arch.extractor_widths {
            out.u32(w as u32)?;
        }
        out.u32(self.arch.head_hidden.len() as u32)?;
        for &w in &self.arch.head_hidden {
            out.u32(w as u32)?;
        }
        let params = self.params();
        out.u32(params.len() as u32)?;
        for (_, p) in params {
            out.matrix(p)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(MODEL_MAGIC)?;
        r.expect_version(MODEL_VERSION)?;
        let num_domains = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let extractor_widths = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let n = r.u32()? as usize;
        let head_hidden = (0..n)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<_>>()?;
        let arch = Architecture {
            input_dim,
            extractor_widths,
            head_hidden,
            num_domains,
            num_classes,
        };
        let offset = r.offset();
        let mut model = Self::zeros(arch).map_err(|e| Error::Format {
            offset,
            detail: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let mut params = model.params_mut();
        if count != params.len() {
            return Err(Error::Format {
                offset: r.offset(),
                detail: format!("expected {} parameters, found {count}", params.len()),
            });
        }
        for (_, p) in params.iter_mut() {
            let offset = r.offset();
            let m = r.matrix()?;
            if m.shape() != p.shape() {
                return Err(Error::Format {
                    offset,
                    detail: format!("parameter shape {:?}, expected {:?}", m.shape(), p.shape()),
                });
            }
            **p = m;
        }
        drop(params);
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8; 8] = b"CRMAMODL";
const MODEL_VERSION: u32 = 1;

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Probabilities and logits of one head.
#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub probs: Tensor,
    pub logits: Tensor,
    pub domain: usize,
    pub branch: Branch,
}

/// A model's parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    arch: Architecture,
    extractor: Vec<(Tensor, Tensor)>,
    heads: Vec<Vec<(Tensor, Tensor)>>,
}

impl BoundModel {
    pub fn num_domains(&self) -> usize {
        self.arch.num_domains
    }

    pub fn forward_features(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let (_, width) = tape.shape(x);
        if width != self.arch.input_dim {
            return Err(Error::Dimension {
                op: "forward_features",
                lhs: tape.shape(x),
                rhs: (self.arch.input_dim, self.arch.feature_dim()),
            });
        }
        let mut h = x;
        for &(w, b) in &self.extractor {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    fn head_logits(&self, tape: &mut Tape, idx: usize, features: Tensor) -> Result<Tensor> {
        let layers = &self.heads[idx];
        let mut h = features;
        for (i, &(w, b)) in layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn predict(
        &self,
        tape: &mut Tape,
        domain: usize,
        branch: Branch,
        features: Tensor,
    ) -> Result<Prediction> {
        if domain >= self.arch.num_domains {
            return Err(Error::Index {
                index: domain,
                len: self.arch.num_domains,
            });
        }
        let logits = self.head_logits(tape, 2 * domain + branch.index(), features)?;
        let probs = tape.softmax(logits)?;
        Ok(Prediction {
            probs,
            logits,
            domain,
            branch,
        })
    }

    pub fn predict_pair(
        &self,
        tape: &mut Tape,
        domain: usize,
        features: Tensor,
    ) -> Result<(Prediction, Prediction)> {
        Ok((
            self.predict(tape, domain, Branch::A, features)?,
            self.predict(tape, domain, Branch::B, features)?,
        ))
    }

    /// Predictions of every pair on the same features, indexed by domain.
    pub fn predict_all(
        &self,
        tape: &mut Tape,
        features: Tensor,
    ) -> Result<Vec<(Prediction, Prediction)>> {
        (0..self.arch.num_domains)
            .map(|m| self.predict_pair(tape, m, features))
            .collect()
    }

    /// Mean over all `2M` heads' probabilities.
    pub fn final_prediction(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor> {
        let f = self.forward_features(tape, x)?;
        let pairs = self.predict_all(tape, f)?;
        let mut acc = pairs[0].0.probs;
        for (i, (a, b)) in pairs.iter().enumerate() {
            if i > 0 {
                acc = tape.add(acc, a.probs)?;
            }
            acc = tape.add(acc, b.probs)?;
        }
        Ok(tape.scale(acc, 1.0 / (2 * self.arch.num_domains) as f64))
    }

    /// Gradients in [`CrmaModel::params`] order; zeros for constant groups.
    pub fn gradients(&self, tape: &Tape) -> Vec<Matrix> {
        self.extractor
            .iter()
            .chain(self.heads.iter().flatten())
            .flat_map(|&(w, b)| [tape.grad(w), tape.grad(b)])
            .collect()
    }
}

/// `(p_a + p_b) / 2`.
pub fn mean_pair_prediction(tape: &mut Tape, a: Tensor, b: Tensor) -> Result<Tensor> {
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}
