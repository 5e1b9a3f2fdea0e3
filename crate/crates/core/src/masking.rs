//! Time-axis span masking over latent frame sequences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;
use crate::{Error, Result};

/// How the configured masking probability is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskProbability {
    /// Probability is the target masked fraction; each frame starts a span
    /// with probability `fraction / span_length`.
    #[default]
    TargetFraction,
    /// Probability is the per-frame span start probability.
    StartProbability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    frames: usize,
    /// Sorted, deduplicated masked frame indices.
    masked: Vec<usize>,
    pub span_length: usize,
    pub target_fraction: f64,
    pub rng_seed: u64,
}

impl MaskPlan {
    /// Plan from explicit span starts; spans are clipped at `frames` and
    /// overlaps merge.
    pub fn from_starts(frames: usize, span_length: usize, starts: &[usize]) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("mask over zero frames".into()));
        }
        if span_length == 0 {
            return Err(Error::InvalidArgument("span length must be at least 1".into()));
        }
        let mut flags = vec![false; frames];
        for &s in starts {
            if s >= frames {
                return Err(Error::InvalidArgument(format!("span start {s} outside {frames} frames")));
            }
            flags[s..(s + span_length).min(frames)].iter_mut().for_each(|f| *f = true);
        }
        Ok(Self::from_flags(flags, span_length, 0.0, 0))
    }

    fn from_flags(flags: Vec<bool>, span_length: usize, target_fraction: f64, rng_seed: u64) -> Self {
        Self {
            frames: flags.len(),
            masked: flags.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
            span_length,
            target_fraction,
            rng_seed,
        }
    }

    pub fn empty(frames: usize) -> Self {
        Self::from_flags(vec![false; frames], 1, 0.0, 0)
    }

    pub fn full(frames: usize) -> Self {
        Self::from_flags(vec![true; frames], frames.max(1), 1.0, 0)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.frames];
        for &i in &self.masked {
            flags[i] = true;
        }
        flags
    }
}

/// Start probability implied by a masking probability under `mode`.
pub fn start_probability(target_fraction: f64, span_length: usize, mode: MaskProbability) -> f64 {
    match mode {
        MaskProbability::TargetFraction => target_fraction / span_length as f64,
        MaskProbability::StartProbability => target_fraction,
    }
}

/// Draws span starts independently per frame and masks `span_length` frames
/// from each start.
pub fn sample_spans(
    frames: usize,
    span_length: usize,
    target_fraction: f64,
    mode: MaskProbability,
    rng_seed: u64,
) -> Result<MaskPlan> {
    if frames == 0 {
        return Err(Error::InvalidArgument("mask over zero frames".into()));
    }
    if span_length == 0 {
        return Err(Error::InvalidArgument("span length must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(Error::InvalidArgument(format!("masking probability {target_fraction} outside [0, 1]")));
    }
    let p = start_probability(target_fraction, span_length, mode);
    let mut rng = rng_for(rng_seed, &[]);
    let mut flags = vec![false; frames];
    for s in 0..frames {
        if p > 0.0 && rng.gen_bool(p) {
            flags[s..(s + span_length).min(frames)].iter_mut().for_each(|f| *f = true);
        }
    }
    Ok(MaskPlan::from_flags(flags, span_length, target_fraction, rng_seed))
}

/// Replaces masked rows of a row-major `frames x channels` matrix with the
/// shared mask vector.
pub fn apply_mask(latents: &[f64], channels: usize, plan: &MaskPlan, mask_vector: &[f64]) -> Result<Vec<f64>> {
    if mask_vector.len() != channels {
        return Err(Error::DimensionMismatch { what: "mask vector", expected: channels, actual: mask_vector.len() });
    }
    if latents.len() != plan.frames() * channels {
        return Err(Error::DimensionMismatch {
            what: "latents",
            expected: plan.frames() * channels,
            actual: latents.len(),
        });
    }
    let mut out = latents.to_vec();
    for &t in plan.masked() {
        out[t * channels..(t + 1) * channels].copy_from_slice(mask_vector);
    }
    Ok(out)
}
