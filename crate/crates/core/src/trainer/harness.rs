//! Reduced gradient-check harness: the tiny model on two 0.4 s excerpts from
//! two speakers, one bona fide and one spoof, with their first 20 target
//! frames.

use crate::corpus::{gen_speaker_profile, synth_utterance, AttackFamily, Label};
use crate::data::Example;
use crate::masking::MaskProbability;
use crate::model::gradcheck::{grad_check, GradCheckReport};
use crate::model::{ModelConfig, ModelParams};
use crate::objective::LossWeights;
use crate::prosody::PitchConfig;
use crate::speaker::{SpeakerEncoder, DEFAULT_EXPANSION_SEED};
use crate::targets::{corpus_targets, ProsodicTargetSequence};
use crate::{Result, TARGET_DIM};

use super::step::{mask_plans, stage1_loss_and_grad, stage2_loss_and_grad, BatchItem, SslPass, SslSettings, StageIISettings, StepSeed};

/// Coordinates sampled per parameter group.
pub const COORDS_PER_GROUP: usize = 256;
/// Finite-difference step.
pub const EPSILON: f64 = 1e-3;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

pub struct Harness {
    pub params: ModelParams,
    pub examples: Vec<Example>,
    pub ssl: SslSettings,
    pub weights: LossWeights,
    pub step: StepSeed,
}

#[derive(Debug, Clone)]
pub struct HarnessReport {
    pub stage1: GradCheckReport,
    pub stage2: GradCheckReport,
}

impl HarnessReport {
    pub fn max_rel_error(&self) -> f64 {
        self.stage1.max_rel_error().max(self.stage2.max_rel_error())
    }

    pub fn passes(&self) -> bool {
        self.stage1.passes(TOLERANCE) && self.stage2.passes(TOLERANCE)
    }
}

pub fn tiny_harness(seed: u64) -> Result<Harness> {
    let cfg = ModelConfig::tiny();
    let params = ModelParams::init(&cfg, seed)?;
    let n = cfg.input_samples();
    let profiles = [gen_speaker_profile(seed, 0), gen_speaker_profile(seed, 1)];
    let utts = [
        synth_utterance(&profiles[0], AttackFamily::None, seed ^ 1, None)?,
        synth_utterance(&profiles[1], AttackFamily::FlatPitch, seed ^ 2, None)?,
    ];
    let inputs: Vec<(String, String, Vec<f32>)> = utts
        .iter()
        .enumerate()
        .map(|(i, u)| (format!("tiny{i}"), profiles[i].speaker_id.clone(), u.samples.clone()))
        .collect();
    let full = corpus_targets(&inputs, &SpeakerEncoder::new(DEFAULT_EXPANSION_SEED), &PitchConfig::default())?;
    let examples = full
        .iter()
        .zip(&utts)
        .map(|(t, u)| {
            let rows = t.rows()[..cfg.frames * TARGET_DIM].to_vec();
            Ok(Example {
                utterance_id: t.utterance_id.clone(),
                speaker_id: t.speaker_id.clone(),
                label: u.label,
                attack_family: u.attack_family,
                samples: u.samples[..n].to_vec(),
                targets: Some(ProsodicTargetSequence::from_rows(&t.speaker_id, &t.utterance_id, cfg.frames, rows)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ssl = SslSettings { span_length: 4, mask_prob: 0.5, mask_mode: MaskProbability::TargetFraction, tau: 0.1, negatives: 100 };
    // first step index whose masks are non-empty for both items, so every
    // parameter of the projection head is reached
    let mut step = StepSeed { base: seed, epoch: 1, step: 1 };
    while mask_plans(examples.len(), cfg.frames, &ssl, &step)?.iter().any(|p| p.is_empty()) {
        step.step += 1;
    }
    debug_assert!(examples.iter().any(|e| e.label == Label::Spoof));
    let weights = LossWeights::new(1.0, 0.2, [1.0, 1.0])?;
    Ok(Harness { params, examples, ssl, weights, step })
}

impl Harness {
    fn batch(&self) -> Vec<BatchItem<'_>> {
        self.examples
            .iter()
            .map(|e| BatchItem { samples: &e.samples, targets: e.targets.as_ref(), label: e.label })
            .collect()
    }

    pub fn stage2_settings(&self) -> StageIISettings {
        StageIISettings { ssl: self.ssl, weights: self.weights, pass: SslPass::Active, ssl_on_bonafide_only: false }
    }

    pub fn check_stage1(&self) -> Result<GradCheckReport> {
        let batch = self.batch();
        let (_, grads) = stage1_loss_and_grad(&self.params, &batch, &self.ssl, &self.step)?;
        let loss = |p: &ModelParams| Ok(stage1_loss_and_grad(p, &batch, &self.ssl, &self.step)?.0.l_ssl);
        grad_check(&self.params, &grads, loss, COORDS_PER_GROUP, EPSILON, self.step.base)
    }

    /// Joint loss with both passes active; the classifier group is only
    /// reached through this loss.
    pub fn check_stage2(&self) -> Result<GradCheckReport> {
        let batch = self.batch();
        let s = self.stage2_settings();
        let (_, grads) = stage2_loss_and_grad(&self.params, &batch, &s, &self.step)?;
        let loss = |p: &ModelParams| Ok(stage2_loss_and_grad(p, &batch, &s, &self.step)?.0.l_total);
        grad_check(&self.params, &grads, loss, COORDS_PER_GROUP, EPSILON, self.step.base ^ 0x5a)
    }
}

pub fn run_gradcheck(seed: u64) -> Result<HarnessReport> {
    let h = tiny_harness(seed)?;
    Ok(HarnessReport { stage1: h.check_stage1()?, stage2: h.check_stage2()? })
}
