//! Training objectives and the adaptive pseudo-labelling formulas.
//!
//! Tape-level functions build differentiable losses from [`Prediction`]s.
//! The per-sample weighting math (`domain_weights`, `pseudo_label`, `ast_beta`,
//! `kl_divergence`, `discrepancy`) works on plain slices because its outputs
//! are treated as constants during back-propagation.
//!
//! Every expectation over a mini-batch is the arithmetic mean over its rows.

use crate::autodiff::{Tape, Tensor, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{mean_pair_prediction, Prediction};

/// Floor applied to the denominator of each raw domain weight.
pub const WEIGHT_FLOOR: f64 = 1e-8;

/// Tolerance on the row sum of an input probability vector.
const NORMALIZATION_TOL: f64 = 1e-6;

fn one_hot(labels: &[usize], k: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(labels.len(), k);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::contract(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        m.set(i, y, 1.0);
    }
    Ok(m)
}

/// Mean negative log-likelihood of `labels` under `probs`.
pub fn cross_entropy(tape: &mut Tape, probs: Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = tape.shape(probs);
    if n != labels.len() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: (n, k),
            rhs: (labels.len(), 1),
        });
    }
    let target = tape.constant(one_hot(labels, k)?);
    let logp = tape.log(probs)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n.max(1) as f64))
}

/// Source classification loss: for each domain `m`, the cross-entropy of both
/// heads of pair `m` on domain `m`'s labelled batch, summed over pairs and branches.
///
/// `preds[m]` must be the pair evaluated on source batch `m`.
pub fn source_ce_loss(
    tape: &mut Tape,
    preds: &[(Prediction, Prediction)],
    labels: &[&[usize]],
) -> Result<Tensor> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::contract(format!(
            "{} prediction pairs for {} labelled batches",
            preds.len(),
            labels.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for ((a, b), y) in preds.iter().zip(labels) {
        for p in [a, b] {
            let ce = cross_entropy(tape, p.probs, y)?;
            total = Some(match total {
                Some(t) => tape.add(t, ce)?,
                None => ce,
            });
        }
    }
    Ok(total.expect("non-empty"))
}

/// Per-row discrepancy `(1/K) Σ_k |p_k − q_k|` as an `[n×1]` tensor.
pub fn pair_discrepancy(tape: &mut Tape, p: Tensor, q: Tensor) -> Result<Tensor> {
    let k = tape.shape(p).1;
    let diff = tape.sub(p, q)?;
    let abs = tape.abs(diff);
    let rows = tape.row_sum(abs);
    Ok(tape.scale(rows, 1.0 / k as f64))
}

/// Intra-domain consistency loss together with its per-sample, per-domain terms.
#[derive(Clone, Debug)]
pub struct IntraConsistency {
    /// Batch mean of `Σ_m d(p_m^a, p_m^b)`.
    pub loss: Tensor,
    /// `[n×M]` values of `d(p_m^a, p_m^b)`.
    pub per_sample: Matrix,
}

pub fn intra_consistency_loss(
    tape: &mut Tape,
    pairs: &[(Prediction, Prediction)],
) -> Result<IntraConsistency> {
    if pairs.is_empty() {
        return Err(Error::contract("no classifier pairs"));
    }
    let n = tape.shape(pairs[0].0.probs).0;
    let mut per_sample = Matrix::zeros(n, pairs.len());
    let mut total: Option<Tensor> = None;
    for (m, (a, b)) in pairs.iter().enumerate() {
        let d = pair_discrepancy(tape, a.probs, b.probs)?;
        for (i, &v) in tape.value(d).data().iter().enumerate() {
            per_sample.set(i, m, v);
        }
        total = Some(match total {
            Some(t) => tape.add(t, d)?,
            None => d,
        });
    }
    let loss = tape.mean(total.expect("non-empty"));
    Ok(IntraConsistency { loss, per_sample })
}

/// Mean prediction `(p_m^a + p_m^b)/2` for every pair.
pub fn mean_predictions(
    tape: &mut Tape,
    pairs: &[(Prediction, Prediction)],
) -> Result<Vec<Tensor>> {
    pairs
        .iter()
        .map(|(a, b)| mean_pair_prediction(tape, a.probs, b.probs))
        .collect()
}

/// Batch mean of `Σ_{m<n} d(p̂_m, p̂_n)`. Exactly zero (a constant) for one domain.
pub fn inter_consistency_loss(tape: &mut Tape, means: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for m in 0..means.len() {
        for n in m + 1..means.len() {
            let d = pair_discrepancy(tape, means[m], means[n])?;
            total = Some(match total {
                Some(t) => tape.add(t, d)?,
                None => d,
            });
        }
    }
    Ok(match total {
        Some(t) => tape.mean(t),
        None => tape.constant(Matrix::scalar(0.0)),
    })
}

/// `L_src − L_intra`, minimized over classifier parameters.
pub fn classifier_objective(tape: &mut Tape, l_src: Tensor, l_intra: Tensor) -> Result<Tensor> {
    tape.sub(l_src, l_intra)
}

/// `L_intra + α·L_inter`, minimized over extractor parameters.
pub fn extractor_objective(
    tape: &mut Tape,
    l_intra: Tensor,
    l_inter: Tensor,
    alpha: f64,
) -> Result<Tensor> {
    let scaled = tape.scale(l_inter, alpha);
    tape.add(l_intra, scaled)
}

fn check_prob(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL
        || p.iter().any(|&x| x < -NORMALIZATION_TOL || x.is_nan())
    {
        return Err(Error::contract(format!(
            "{what} is not a probability vector (sum {s})"
        )));
    }
    Ok(())
}

/// `(1/K) Σ_k |p_k − q_k|` for two probability vectors.
pub fn discrepancy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Dimension {
            op: "discrepancy",
            lhs: (1, p.len()),
            rhs: (1, q.len()),
        });
    }
    check_prob(p, "p")?;
    check_prob(q, "q")?;
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// `Σ_k p_k log(p_k / q_k)` with `0·log 0 = 0` and `q` clamped at the log floor.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pk, _)| pk > 0.0)
        .map(|(&pk, &qk)| pk * (pk.max(LOG_FLOOR).ln() - qk.max(LOG_FLOOR).ln()))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainWeights {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl DomainWeights {
    /// `w_m = 1/M` for every domain.
    pub fn uniform(num_domains: usize) -> Self {
        let w = 1.0 / num_domains as f64;
        Self {
            raw: vec![w; num_domains],
            normalized: vec![w; num_domains],
        }
    }
}

/// Confidence weights for one target sample:
/// `w_m = 1 / max(d_m + λ·L̄_m, ε)`, normalized to sum to one.
pub fn domain_weights(
    discrepancies: &[f64],
    running_means: &[f64],
    lambda: f64,
) -> Result<DomainWeights> {
    if discrepancies.len() != running_means.len() || discrepancies.is_empty() {
        return Err(Error::Dimension {
            op: "domain_weights",
            lhs: (1, discrepancies.len()),
            rhs: (1, running_means.len()),
        });
    }
    if lambda < 0.0
        || running_means
            .iter()
            .chain(discrepancies)
            .any(|&v| !(v >= 0.0))
    {
        return Err(Error::contract(
            "domain weights need non-negative inputs and λ",
        ));
    }
    let denoms: Vec<f64> = discrepancies
        .iter()
        .zip(running_means)
        .map(|(d, mean)| d + lambda * mean)
        .collect();
    let raw: Vec<f64> = denoms
        .iter()
        .map(|&den| 1.0 / den.max(WEIGHT_FLOOR))
        .collect();
    let normalized = if denoms.iter().all(|&den| den <= WEIGHT_FLOOR) {
        log::debug!("every domain-weight denominator at the floor; using uniform weights");
        vec![1.0 / raw.len() as f64; raw.len()]
    } else {
        let total: f64 = raw.iter().sum();
        raw.iter().map(|w| w / total).collect()
    };
    Ok(DomainWeights { raw, normalized })
}

/// Convex combination `Σ_m ŵ_m p̂_m` of the per-domain mean predictions.
pub fn pseudo_label(mean_preds: &[&[f64]], weights: &DomainWeights) -> Result<Vec<f64>> {
    if mean_preds.len() != weights.normalized.len() || mean_preds.is_empty() {
        return Err(Error::contract(
            "one mean prediction per domain weight required",
        ));
    }
    let k = mean_preds[0].len();
    let mut out = vec![0.0; k];
    for (p, &w) in mean_preds.iter().zip(&weights.normalized) {
        if p.len() != k {
            return Err(Error::Dimension {
                op: "pseudo_label",
                lhs: (1, k),
                rhs: (1, p.len()),
            });
        }
        for (o, &v) in out.iter_mut().zip(p.iter()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Self-training weight `β = min_m(L̄_m) · Σ_m w_m` from raw weights.
pub fn ast_beta(raw_weights: &[f64], running_means: &[f64]) -> f64 {
    let min_mean = running_means.iter().copied().fold(f64::INFINITY, f64::min);
    if !min_mean.is_finite() {
        return 0.0;
    }
    min_mean * raw_weights.iter().sum::<f64>()
}

/// How pseudo labels combine the per-domain mean predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PseudoLabelWeighting {
    /// Confidence weights from intra-domain consistency.
    #[default]
    Adaptive,
    /// Equal weight `1/M` per domain.
    Uniform,
}

/// Pseudo labels and self-training weights for a target batch.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// `[n×K]`, rows are probability vectors.
    pub probs: Matrix,
    pub beta: Vec<f64>,
    /// Per-sample normalized domain weights, `[n×M]`.
    pub weights: Matrix,
}

/// Builds per-sample pseudo labels from the `[n×M]` discrepancy matrix and the
/// `M` mean-prediction matrices (`[n×K]` each).
pub fn build_pseudo_labels(
    per_sample: &Matrix,
    means: &[&Matrix],
    running_means: &[f64],
    lambda: f64,
    weighting: PseudoLabelWeighting,
) -> Result<PseudoLabels> {
    let (n, m) = per_sample.shape();
    if means.len() != m || running_means.len() != m {
        return Err(Error::contract(
            "mean predictions, running means and discrepancies disagree on M",
        ));
    }
    let k = means[0].cols();
    let mut probs = Matrix::zeros(n, k);
    let mut beta = Vec::with_capacity(n);
    let mut weights = Matrix::zeros(n, m);
    for i in 0..n {
        let w = match weighting {
            PseudoLabelWeighting::Adaptive => {
                domain_weights(per_sample.row(i), running_means, lambda)?
            }
            PseudoLabelWeighting::Uniform => DomainWeights::uniform(m),
        };
        let rows: Vec<&[f64]> = means.iter().map(|p| p.row(i)).collect();
        probs.row_mut(i).copy_from_slice(&pseudo_label(&rows, &w)?);
        beta.push(ast_beta(&w.raw, running_means));
        weights.row_mut(i).copy_from_slice(&w.normalized);
    }
    Ok(PseudoLabels {
        probs,
        beta,
        weights,
    })
}

/// Per-row `D_KL(p ‖ target)` as `[n×1]`; `target` is a constant.
fn kl_rows(tape: &mut Tape, p: Tensor, log_target: Tensor) -> Result<Tensor> {
    let logp = tape.log(p)?;
    let diff = tape.sub(logp, log_target)?;
    let terms = tape.mul(p, diff)?;
    Ok(tape.row_sum(terms))
}

/// Batch mean of `β_i Σ_m [D_KL(p_m^a ‖ P_i) + D_KL(p_m^b ‖ P_i)]`.
///
/// `pseudo` and `beta` are recorded as constants, so no gradient reaches them.
pub fn ast_loss(
    tape: &mut Tape,
    pairs: &[(Prediction, Prediction)],
    pseudo: &Matrix,
    beta: &[f64],
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::contract("no classifier pairs"));
    }
    let shape = tape.shape(pairs[0].0.probs);
    if pseudo.shape() != shape || beta.len() != shape.0 {
        return Err(Error::Dimension {
            op: "ast_loss",
            lhs: shape,
            rhs: pseudo.shape(),
        });
    }
    let log_target = tape.constant(pseudo.map(|x| x.max(LOG_FLOOR).ln()));
    let mut total: Option<Tensor> = None;
    for (a, b) in pairs {
        for p in [a, b] {
            let kl = kl_rows(tape, p.probs, log_target)?;
            total = Some(match total {
                Some(t) => tape.add(t, kl)?,
                None => kl,
            });
        }
    }
    let weights = tape.constant(Matrix::column(beta.to_vec()));
    let weighted = tape.mul(total.expect("non-empty"), weights)?;
    Ok(tape.mean(weighted))
}
