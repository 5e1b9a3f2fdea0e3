//! InfoNCE with intra/inter-speaker negatives, weighted cross-entropy and
//! the joint loss.
//!
//! Every loss comes with a `*_with_grad` variant returning the gradient with
//! respect to its differentiable input (prediction or logits). Targets are
//! constants.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::targets::ProsodicTargetSequence;
use crate::{Error, Result, SPEAKER_DIM};

/// Denominator guard for cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Negatives per masked frame, half intra- and half inter-speaker.
    pub negatives: usize,
    pub tau_stage1: f64,
    pub tau_stage2: f64,
    pub alpha: f64,
    pub beta_initial: f64,
    /// Number of leading epochs trained with `beta_initial`.
    pub beta_initial_epochs: usize,
    pub beta_later: f64,
    /// Explicit class weights `[bonafide, spoof]`; inverse class frequency
    /// of the training split when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<[f64; 2]>,
    /// Restrict the auxiliary masked-prediction loss to bona fide items.
    pub ssl_on_bonafide_only: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            negatives: 100,
            tau_stage1: 0.07,
            tau_stage2: 0.1,
            alpha: 1.0,
            beta_initial: 0.2,
            beta_initial_epochs: 4,
            beta_later: 0.05,
            class_weights: None,
            ssl_on_bonafide_only: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives < 2 {
            return Err(Error::Config("negatives must be at least 2".into()));
        }
        if !(self.tau_stage1 > 0.0 && self.tau_stage2 > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta_initial < 0.0 || self.beta_later < 0.0 {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if let Some(w) = self.class_weights {
            if !(w[0] > 0.0 && w[1] > 0.0) {
                return Err(Error::Config("class weights must be positive".into()));
            }
        }
        Ok(())
    }

    /// Auxiliary-loss weight for a 1-based epoch.
    pub fn beta(&self, epoch: usize) -> f64 {
        if epoch <= self.beta_initial_epochs {
            self.beta_initial
        } else {
            self.beta_later
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// `[bonafide, spoof]`.
    pub class_weights: [f64; 2],
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, class_weights: [f64; 2]) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::InvalidArgument("alpha and beta must be non-negative".into()));
        }
        if !(class_weights[0] > 0.0 && class_weights[1] > 0.0) {
            return Err(Error::InvalidArgument("class weights must be positive".into()));
        }
        Ok(Self { alpha, beta, class_weights })
    }
}

/// `w_c = N / (2 n_c)` from `[bonafide, spoof]` counts.
pub fn inverse_frequency_weights(counts: [usize; 2]) -> Result<[f64; 2]> {
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::SingleClass);
    }
    let n = (counts[0] + counts[1]) as f64;
    Ok([n / (2.0 * counts[0] as f64), n / (2.0 * counts[1] as f64)])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = (dot(a, a).sqrt() * dot(b, b).sqrt()).max(COSINE_EPS);
    dot(a, b) / denom
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let ab = dot(a, b);
    let prod = na * nb;
    if prod <= COSINE_EPS {
        return (ab / COSINE_EPS, b.iter().map(|v| v / COSINE_EPS).collect());
    }
    let cos = ab / prod;
    let inv_a2 = 1.0 / (na * na);
    let grad = a.iter().zip(b).map(|(x, y)| y / prod - cos * x * inv_a2).collect();
    (cos, grad)
}

/// Negatives for one masked frame, materialised as target vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    /// Source frame of each intra-speaker negative (same utterance).
    pub intra_frames: Vec<usize>,
    /// Batch item supplying the speaker block of each inter-speaker negative.
    pub inter_items: Vec<usize>,
    /// `spk_A || f_{t'}`.
    pub intra: Vec<Vec<f64>>,
    /// `spk_B || f_t`.
    pub inter: Vec<Vec<f64>>,
}

impl NegativeSet {
    pub fn len(&self) -> usize {
        self.intra.len() + self.inter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.intra.iter().chain(&self.inter).map(Vec::as_slice)
    }
}

fn row_f64(row: &[f32]) -> Vec<f64> {
    row.iter().map(|&v| v as f64).collect()
}

/// Samples `k / 2` intra-speaker and `k - k / 2` inter-speaker negatives for
/// frame `t` of batch item `item`.
pub fn sample_negatives(
    item: usize,
    t: usize,
    batch: &[&ProsodicTargetSequence],
    k: usize,
    rng: &mut Rng,
) -> Result<NegativeSet> {
    let own = batch.get(item).ok_or_else(|| Error::InvalidArgument(format!("batch item {item} out of range")))?;
    let frames = own.frames();
    if frames < 2 {
        return Err(Error::InvalidArgument("intra-speaker negatives need at least 2 frames".into()));
    }
    if t >= frames {
        return Err(Error::InvalidArgument(format!("frame {t} outside {frames} frames")));
    }
    let others: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].speaker_id != own.speaker_id).collect();
    if others.is_empty() {
        return Err(Error::InterSpeakerNegativesUnavailable);
    }
    let n_intra = k / 2;
    let n_inter = k - n_intra;
    let pool = frames - 1;
    let skip_t = |i: usize| if i < t { i } else { i + 1 };
    let intra_frames: Vec<usize> = if pool >= n_intra {
        index::sample(rng, pool, n_intra).into_iter().map(skip_t).collect()
    } else {
        (0..n_intra).map(|_| skip_t(rng.gen_range(0..pool))).collect()
    };
    let inter_items: Vec<usize> = (0..n_inter).map(|_| others[rng.gen_range(0..others.len())]).collect();
    let intra = intra_frames.iter().map(|&f| row_f64(own.row(f))).collect();
    let prosody = own.prosody_block(t);
    let inter = inter_items
        .iter()
        .map(|&j| {
            let mut v = row_f64(batch[j].speaker_block(0));
            v.extend(prosody.iter().map(|&x| x as f64));
            v
        })
        .collect();
    Ok(NegativeSet { intra_frames, inter_items, intra, inter })
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `-log softmax` of the positive among positive and negatives, with cosine
/// similarities scaled by `1 / tau`.
pub fn infonce_loss(prediction: &[f64], positive: &[f64], negatives: &NegativeSet, tau: f64) -> f64 {
    let mut s = Vec::with_capacity(negatives.len() + 1);
    s.push(cosine_similarity(prediction, positive) / tau);
    s.extend(negatives.iter().map(|n| cosine_similarity(prediction, n) / tau));
    log_sum_exp(&s) - s[0]
}

/// InfoNCE over explicit negative vectors, with the gradient with respect
/// to `prediction`.
pub fn infonce_with_grad<'a>(
    prediction: &[f64],
    positive: &[f64],
    negatives: impl Iterator<Item = &'a [f64]>,
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut sims = vec![cosine_with_grad(prediction, positive)];
    sims.extend(negatives.map(|n| cosine_with_grad(prediction, n)));
    let s: Vec<f64> = sims.iter().map(|(c, _)| c / tau).collect();
    let lse = log_sum_exp(&s);
    let loss = lse - s[0];
    let mut grad = vec![0.0; prediction.len()];
    for (j, (_, g)) in sims.iter().enumerate() {
        let coeff = ((s[j] - lse).exp() - if j == 0 { 1.0 } else { 0.0 }) / tau;
        if coeff != 0.0 {
            grad.iter_mut().zip(g).for_each(|(acc, gv)| *acc += coeff * gv);
        }
    }
    (loss, grad)
}

/// `-log softmax(logits)[label]` and its gradient.
pub fn cross_entropy_with_grad(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - lse).exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    (lse - logits[label], grad)
}

/// `-w_label * log softmax(logits)[label]`.
pub fn weighted_cross_entropy(logits: &[f64], label: usize, class_weights: &[f64; 2]) -> f64 {
    class_weights[label] * (log_sum_exp(logits) - logits[label])
}

/// Batch loss `sum_i w_i nll_i / sum_i w_i` and per-item logit gradients.
pub fn batch_weighted_cross_entropy(items: &[(Vec<f64>, usize)], class_weights: &[f64; 2]) -> (f64, Vec<Vec<f64>>) {
    let total_w: f64 = items.iter().map(|(_, y)| class_weights[*y]).sum();
    if items.is_empty() || total_w <= 0.0 {
        return (0.0, vec![Vec::new(); items.len()]);
    }
    let mut loss = 0.0;
    let grads = items
        .iter()
        .map(|(logits, y)| {
            let w = class_weights[*y] / total_w;
            let (nll, g) = cross_entropy_with_grad(logits, *y);
            loss += w * nll;
            g.into_iter().map(|v| v * w).collect()
        })
        .collect();
    (loss, grads)
}

pub fn joint_loss(l_cls: f64, l_ssl: f64, weights: &LossWeights) -> f64 {
    weights.alpha * l_cls + weights.beta * l_ssl
}

/// Speaker block of the target for `item`, used to verify negatives.
pub fn speaker_block_f64(seq: &ProsodicTargetSequence) -> Vec<f64> {
    row_f64(&seq.row(0)[..SPEAKER_DIM])
}
