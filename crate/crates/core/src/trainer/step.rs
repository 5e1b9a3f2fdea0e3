//! Loss and gradient of one batch for both stages.
//!
//! Per-item work runs in parallel; per-item gradients are summed in item
//! order afterwards so results do not depend on the thread count. Upstream
//! gradients are pre-scaled by the loss weights, so a zero weight
//! contributes exact zeros.

use rayon::prelude::*;

use crate::corpus::Label;
use crate::masking::{apply_mask, sample_spans, MaskPlan, MaskProbability};
use crate::model::{accumulate, Mode, ModelParams};
use crate::objective::{cross_entropy_with_grad, infonce_with_grad, sample_negatives, LossWeights};
use crate::rng::{derive_seed, tag};
use crate::targets::ProsodicTargetSequence;
use crate::{Error, Result};

/// One utterance of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub samples: &'a [f32],
    pub targets: Option<&'a ProsodicTargetSequence>,
    pub label: Label,
}

/// Masked-prediction pass settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslSettings {
    pub span_length: usize,
    pub mask_prob: f64,
    pub mask_mode: MaskProbability,
    pub tau: f64,
    pub negatives: usize,
}

/// Whether the second stage runs its masked pass at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslPass {
    Active,
    /// Classification-only step; `l_ssl` is reported as 0.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageIISettings {
    pub ssl: SslSettings,
    pub weights: LossWeights,
    pub pass: SslPass,
    pub ssl_on_bonafide_only: bool,
}

/// Identifies a step so every random draw inside it has its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeed {
    pub base: u64,
    pub epoch: u64,
    pub step: u64,
}

impl StepSeed {
    fn item(&self, kind: u64, item: usize) -> u64 {
        derive_seed(self.base, &[kind, self.epoch, self.step, item as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageIStepReport {
    pub l_ssl: f64,
    pub masked_frame_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageIIStepReport {
    pub l_ssl: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub masked_frame_count: usize,
    pub beta: f64,
}

struct ItemOut {
    grads: Vec<f64>,
    ssl_loss: Option<f64>,
    nll: f64,
    masked: usize,
}

fn batch_targets<'a>(batch: &[BatchItem<'a>], frames: usize) -> Result<Vec<&'a ProsodicTargetSequence>> {
    batch
        .iter()
        .map(|b| {
            let t = b.targets.ok_or_else(|| Error::InvalidArgument("masked prediction needs target sequences".into()))?;
            if t.frames() != frames {
                return Err(Error::DimensionMismatch { what: "target frames", expected: frames, actual: t.frames() });
            }
            Ok(t)
        })
        .collect()
}

pub(crate) fn mask_plans(batch_len: usize, frames: usize, s: &SslSettings, seed: &StepSeed) -> Result<Vec<MaskPlan>> {
    (0..batch_len)
        .map(|i| sample_spans(frames, s.span_length, s.mask_prob, s.mask_mode, seed.item(tag::MASK, i)))
        .collect()
}

/// Masked forward + backward for one item. `scale` multiplies the gradient
/// of the per-utterance mean loss. Returns the loss and the gradient with
/// respect to the unmasked latents.
#[allow(clippy::too_many_arguments)]
fn ssl_pass(
    p: &ModelParams,
    z: &[f64],
    plan: &MaskPlan,
    item: usize,
    targets: &[&ProsodicTargetSequence],
    s: &SslSettings,
    seed: &StepSeed,
    scale: f64,
    grads: &mut [f64],
) -> Result<(f64, Vec<f64>)> {
    let cfg = p.config();
    let hd = cfg.hidden_dim;
    let mask_range = p.layout().range(p.ids().mask);
    let zm = apply_mask(z, hd, plan, p.t(p.ids().mask))?;
    let (h, ctx) = p.context_forward(&zm, Mode::Train { seed: seed.item(tag::DROPOUT_SSL, item) });
    let masked = plan.masked();
    let (gathered, pred) = p.project_rows(&h, masked);
    let td = cfg.target_dim;
    let mut rng = crate::rng::rng_for(seed.item(tag::NEGATIVES, item), &[]);
    let m = masked.len() as f64;
    let mut total = 0.0;
    let mut dpred = vec![0.0; pred.len()];
    for (j, &t) in masked.iter().enumerate() {
        let negs = sample_negatives(item, t, targets, s.negatives, &mut rng)?;
        let pos: Vec<f64> = targets[item].row(t).iter().map(|&v| v as f64).collect();
        let (loss, g) = infonce_with_grad(&pred[j * td..(j + 1) * td], &pos, negs.iter(), s.tau);
        total += loss;
        for (d, gv) in dpred[j * td..(j + 1) * td].iter_mut().zip(&g) {
            *d = gv * scale / m;
        }
    }
    let mut dh = vec![0.0; h.len()];
    p.project_rows_backward(&gathered, masked, &dpred, grads, &mut dh);
    let mut dz = p.context_backward(&ctx, &dh, grads);
    for &t in masked {
        let row = &mut dz[t * hd..(t + 1) * hd];
        accumulate(&mut grads[mask_range.clone()], row);
        row.fill(0.0);
    }
    Ok((total / m, dz))
}

/// Unmasked forward + backward through the classifier. `dscale` multiplies
/// the gradient of the item's unweighted negative log-likelihood.
fn cls_pass(
    p: &ModelParams,
    z: &[f64],
    label: Label,
    item: usize,
    seed: &StepSeed,
    dscale: f64,
    grads: &mut [f64],
) -> (f64, Vec<f64>) {
    let mode = Mode::Train { seed: seed.item(tag::DROPOUT_CLS, item) };
    let (h, ctx) = p.context_forward(z, mode);
    let (logits, cc) = p.classify_forward(&h, p.config().frames, mode);
    let (nll, g) = cross_entropy_with_grad(&logits, label.class_index());
    let dlogits: Vec<f64> = g.iter().map(|v| v * dscale).collect();
    let dh = p.classify_backward(&cc, &dlogits, grads);
    (nll, p.context_backward(&ctx, &dh, grads))
}

fn reduce(p: &ModelParams, outs: &[ItemOut]) -> Vec<f64> {
    let mut grads = p.zero_grads();
    for o in outs {
        accumulate(&mut grads, &o.grads);
    }
    grads
}

/// Stage I: masked prediction on every item; loss is the mean over items
/// of the per-item mean over masked frames. Items whose mask came out empty
/// are left out of the mean.
pub fn stage1_loss_and_grad(
    p: &ModelParams,
    batch: &[BatchItem<'_>],
    s: &SslSettings,
    seed: &StepSeed,
) -> Result<(StageIStepReport, Vec<f64>)> {
    let frames = p.config().frames;
    let targets = batch_targets(batch, frames)?;
    let plans = mask_plans(batch.len(), frames, s, seed)?;
    let n_ssl = plans.iter().filter(|pl| !pl.is_empty()).count();
    let outs = batch
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut grads = p.zero_grads();
            if plans[i].is_empty() {
                return Ok(ItemOut { grads, ssl_loss: None, nll: 0.0, masked: 0 });
            }
            let (z, enc) = p.encode_forward(b.samples)?;
            let (loss, dz) = ssl_pass(p, &z, &plans[i], i, &targets, s, seed, 1.0 / n_ssl as f64, &mut grads)?;
            p.encode_backward(&enc, &dz, &mut grads);
            Ok(ItemOut { grads, ssl_loss: Some(loss), nll: 0.0, masked: plans[i].len() })
        })
        .collect::<Result<Vec<_>>>()?;
    let l_ssl = if n_ssl == 0 { 0.0 } else { outs.iter().filter_map(|o| o.ssl_loss).sum::<f64>() / n_ssl as f64 };
    let report = StageIStepReport { l_ssl, masked_frame_count: outs.iter().map(|o| o.masked).sum() };
    Ok((report, reduce(p, &outs)))
}

/// Stage II: masked pass (unless skipped) and unmasked classification pass
/// per item, sharing one convolutional encoding; gradients of both passes
/// are summed into one vector.
pub fn stage2_loss_and_grad(
    p: &ModelParams,
    batch: &[BatchItem<'_>],
    s: &StageIISettings,
    seed: &StepSeed,
) -> Result<(StageIIStepReport, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let frames = p.config().frames;
    let w = &s.weights;
    let active = s.pass == SslPass::Active;
    let (targets, plans) = if active {
        (batch_targets(batch, frames)?, mask_plans(batch.len(), frames, &s.ssl, seed)?)
    } else {
        (Vec::new(), Vec::new())
    };
    let eligible = |i: usize| active && !plans[i].is_empty() && (!s.ssl_on_bonafide_only || batch[i].label == Label::Bonafide);
    let n_ssl = (0..batch.len()).filter(|&i| eligible(i)).count();
    let total_w: f64 = batch.iter().map(|b| w.class_weights[b.label.class_index()]).sum();
    let outs = batch
        .par_iter()
        .enumerate()
        .map(|(i, b)| {
            let mut grads = p.zero_grads();
            let (z, enc) = p.encode_forward(b.samples)?;
            let mut dz = vec![0.0; z.len()];
            let mut ssl_loss = None;
            let mut masked = 0;
            if eligible(i) {
                let scale = w.beta / n_ssl as f64;
                let (loss, d) = ssl_pass(p, &z, &plans[i], i, &targets, &s.ssl, seed, scale, &mut grads)?;
                accumulate(&mut dz, &d);
                ssl_loss = Some(loss);
                masked = plans[i].len();
            }
            let dscale = w.alpha * w.class_weights[b.label.class_index()] / total_w;
            let (nll, d) = cls_pass(p, &z, b.label, i, seed, dscale, &mut grads);
            accumulate(&mut dz, &d);
            p.encode_backward(&enc, &dz, &mut grads);
            Ok(ItemOut { grads, ssl_loss, nll, masked })
        })
        .collect::<Result<Vec<_>>>()?;
    let l_ssl = if n_ssl == 0 { 0.0 } else { outs.iter().filter_map(|o| o.ssl_loss).sum::<f64>() / n_ssl as f64 };
    let l_cls = batch
        .iter()
        .zip(&outs)
        .map(|(b, o)| w.class_weights[b.label.class_index()] * o.nll)
        .sum::<f64>()
        / total_w;
    let report = StageIIStepReport {
        l_ssl,
        l_cls,
        l_total: crate::objective::joint_loss(l_cls, l_ssl, w),
        masked_frame_count: outs.iter().map(|o| o.masked).sum(),
        beta: w.beta,
    };
    Ok((report, reduce(p, &outs)))
}
