//! Stage I (real-speech-only masked prediction) and Stage II (two-pass joint
//! training) loops, model selection and the loss log.

pub mod harness;
mod optimizer;
mod sampler;
mod step;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::data::{class_counts, Example};
use crate::masking::MaskProbability;
use crate::model::{ModelConfig, ModelParams};
use crate::objective::{inverse_frequency_weights, LossWeights, ObjectiveConfig};
use crate::{Error, Result};

pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use sampler::speaker_batches;
pub use step::{
    stage1_loss_and_grad, stage2_loss_and_grad, BatchItem, SslPass, SslSettings, StageIISettings, StageIIStepReport,
    StageIStepReport, StepSeed,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    pub span_length: usize,
    pub prob_stage1: f64,
    pub prob_stage2: f64,
    pub mode: MaskProbability,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { span_length: 8, prob_stage1: 0.25, prob_stage2: 0.15, mode: MaskProbability::TargetFraction }
    }
}

/// Checkpoint selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    TrainLoss,
    ValAccuracy,
}

/// Waveform augmentation; only `none` is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Stage I epochs; Stage II uses `optimizer.epochs`.
    pub stage1_epochs: usize,
    pub stage1_selection: Selection,
    pub stage2_selection: Selection,
    pub augmentation: Augmentation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 50,
            stage1_selection: Selection::TrainLoss,
            stage2_selection: Selection::ValAccuracy,
            augmentation: Augmentation::None,
        }
    }
}

/// Everything the training loops read.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainerConfig {
    pub optimizer: OptimizerConfig,
    pub masking: MaskingConfig,
    pub objective: ObjectiveConfig,
    pub training: TrainingConfig,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.objective.validate()?;
        let m = &self.masking;
        if m.span_length == 0 || !(0.0..=1.0).contains(&m.prob_stage1) || !(0.0..=1.0).contains(&m.prob_stage2) {
            return Err(Error::Config("invalid masking settings".into()));
        }
        if self.training.stage1_epochs == 0 {
            return Err(Error::Config("stage1_epochs must be positive".into()));
        }
        Ok(())
    }

    fn ssl(&self, stage: u8) -> SslSettings {
        let (mask_prob, tau) = if stage == 1 {
            (self.masking.prob_stage1, self.objective.tau_stage1)
        } else {
            (self.masking.prob_stage2, self.objective.tau_stage2)
        };
        SslSettings {
            span_length: self.masking.span_length,
            mask_prob,
            mask_mode: self.masking.mode,
            tau,
            negatives: self.objective.negatives,
        }
    }
}

/// Stage II variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTwoMode {
    /// Initialise from Stage I and keep the auxiliary masked-prediction loss.
    Full,
    /// Fresh initialisation, auxiliary loss kept.
    NoStage1,
    /// Fresh initialisation, auxiliary loss weight 0 and its pass skipped.
    NoMp,
}

impl StageTwoMode {
    pub const ALL: [StageTwoMode; 3] = [StageTwoMode::Full, StageTwoMode::NoStage1, StageTwoMode::NoMp];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTwoMode::Full => "full",
            StageTwoMode::NoStage1 => "no_stage1",
            StageTwoMode::NoMp => "no_mp",
        }
    }
}

impl fmt::Display for StageTwoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageTwoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?} (expected full, no_stage1 or no_mp)")))
    }
}

/// One loss-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLine {
    pub epoch: usize,
    pub step: usize,
    pub l_ssl: f64,
    pub l_cls: f64,
    pub l_total: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t{}\t{}", self.epoch, self.step, self.l_ssl, self.l_cls, self.l_total)
    }
}

impl FromStr for LogLine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse { path: "loss log".into(), msg: format!("bad line {s:?}") };
        let f: Vec<&str> = s.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            step: f[1].parse().map_err(|_| bad())?,
            l_ssl: f[2].parse().map_err(|_| bad())?,
            l_cls: f[3].parse().map_err(|_| bad())?,
            l_total: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn format_log(lines: &[LogLine]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub log: Vec<LogLine>,
    /// Parameters after each epoch.
    pub checkpoints: Vec<ModelParams>,
    /// 1-based epoch chosen by the stage's selection rule.
    pub selected_epoch: usize,
    pub step_reports: Vec<StageIIStepReport>,
}

impl TrainOutcome {
    pub fn selected(&self) -> &ModelParams {
        &self.checkpoints[self.selected_epoch - 1]
    }

    pub fn last(&self) -> &ModelParams {
        self.checkpoints.last().expect("at least one epoch")
    }
}

/// 1-based epoch with the lowest train loss or highest dev accuracy; ties
/// go to the earliest epoch.
pub fn select_checkpoint(history: &[EpochRecord], mode: Selection) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::EmptyInput("training history"));
    }
    let mut best = 0;
    for (i, r) in history.iter().enumerate().skip(1) {
        let better = match mode {
            Selection::TrainLoss => r.train_loss < history[best].train_loss,
            Selection::ValAccuracy => {
                let acc = |x: &EpochRecord| {
                    x.dev_accuracy.ok_or_else(|| Error::InvalidArgument("history lacks dev accuracy".into()))
                };
                acc(r)? > acc(&history[best])?
            }
        };
        if better {
            best = i;
        }
    }
    if mode == Selection::ValAccuracy && history[best].dev_accuracy.is_none() {
        return Err(Error::InvalidArgument("history lacks dev accuracy".into()));
    }
    Ok(history[best].epoch)
}

/// Fraction of `examples` whose evaluation-mode argmax matches the label.
pub fn accuracy(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("accuracy examples"));
    }
    let correct = examples
        .par_iter()
        .map(|e| {
            let logits = params.logits(&e.samples)?;
            let predicted = if logits[0] >= logits[1] { 0 } else { 1 };
            Ok((predicted == e.label.class_index()) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / examples.len() as f64)
}

fn items<'a>(examples: &'a [Example], idx: &[usize]) -> Vec<BatchItem<'a>> {
    idx.iter()
        .map(|&i| {
            let e = &examples[i];
            BatchItem { samples: &e.samples, targets: e.targets.as_ref(), label: e.label }
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Stage I from a seeded random initialisation.
pub fn train_stage1(examples: &[Example], model: &ModelConfig, cfg: &TrainerConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(e) = examples.iter().find(|e| e.label != Label::Bonafide) {
        return Err(Error::StageOneRequiresReal(e.utterance_id.clone()));
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput("stage I examples"));
    }
    let mut params = ModelParams::init(model, seed)?;
    let mut opt = Optimizer::new(&cfg.optimizer, &params);
    let ssl = cfg.ssl(1);
    let speakers: Vec<&str> = examples.iter().map(|e| e.speaker_id.as_str()).collect();
    let (mut history, mut log, mut checkpoints) = (Vec::new(), Vec::new(), Vec::new());
    for epoch in 1..=cfg.training.stage1_epochs {
        let batches = speaker_batches(&speakers, cfg.optimizer.batch_size, seed, epoch)?;
        let mut losses = Vec::with_capacity(batches.len());
        for (s, idx) in batches.iter().enumerate() {
            let step_seed = StepSeed { base: seed, epoch: epoch as u64, step: s as u64 + 1 };
            let (report, grads) = stage1_loss_and_grad(&params, &items(examples, idx), &ssl, &step_seed)?;
            opt.apply(&mut params, &grads)?;
            losses.push(report.l_ssl);
            log.push(LogLine { epoch, step: s + 1, l_ssl: report.l_ssl, l_cls: 0.0, l_total: report.l_ssl });
        }
        let train_loss = mean(&losses);
        log::info!("stage 1 epoch {epoch}: loss {train_loss:.4}");
        history.push(EpochRecord { epoch, train_loss, dev_accuracy: None, beta: 1.0 });
        checkpoints.push(params.clone());
    }
    let selected_epoch = select_checkpoint(&history, cfg.training.stage1_selection)?;
    Ok(TrainOutcome { history, log, checkpoints, selected_epoch, step_reports: Vec::new() })
}

/// Stage II. `init` is the Stage I model for [`StageTwoMode::Full`] and is
/// ignored (with a warning) by the fresh-initialisation modes, which use
/// `ModelParams::init(model, seed)`. The initial parameters are rounded to
/// binary32 so an in-memory hand-off matches a checkpoint on disk.
pub fn train_stage2(
    train: &[Example],
    dev: &[Example],
    init: Option<&ModelParams>,
    mode: StageTwoMode,
    model: &ModelConfig,
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("stage II examples"));
    }
    let mut params = match (mode, init) {
        (StageTwoMode::Full, Some(p)) => {
            if p.config() != model {
                return Err(Error::Config("Stage I checkpoint config differs from the model config".into()));
            }
            p.quantized()
        }
        (StageTwoMode::Full, None) => {
            return Err(Error::InvalidArgument("full mode needs a Stage I checkpoint".into()));
        }
        (_, init) => {
            if init.is_some() {
                log::warn!("mode {mode} uses a fresh initialisation; ignoring the provided checkpoint");
            }
            ModelParams::init(model, seed)?.quantized()
        }
    };
    let class_weights = match cfg.objective.class_weights {
        Some(w) => w,
        None => inverse_frequency_weights(class_counts(train))?,
    };
    let mut opt = Optimizer::new(&cfg.optimizer, &params);
    let speakers: Vec<&str> = train.iter().map(|e| e.speaker_id.as_str()).collect();
    let (mut history, mut log, mut checkpoints, mut reports) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for epoch in 1..=cfg.optimizer.epochs {
        let beta = if mode == StageTwoMode::NoMp { 0.0 } else { cfg.objective.beta(epoch) };
        let settings = StageIISettings {
            ssl: cfg.ssl(2),
            weights: LossWeights::new(cfg.objective.alpha, beta, class_weights)?,
            pass: if mode == StageTwoMode::NoMp { SslPass::Skipped } else { SslPass::Active },
            ssl_on_bonafide_only: cfg.objective.ssl_on_bonafide_only,
        };
        let batches = speaker_batches(&speakers, cfg.optimizer.batch_size, seed, epoch)?;
        let mut losses = Vec::with_capacity(batches.len());
        for (s, idx) in batches.iter().enumerate() {
            let step_seed = StepSeed { base: seed, epoch: epoch as u64, step: s as u64 + 1 };
            let (report, grads) = stage2_loss_and_grad(&params, &items(train, idx), &settings, &step_seed)?;
            opt.apply(&mut params, &grads)?;
            losses.push(report.l_total);
            log.push(LogLine { epoch, step: s + 1, l_ssl: report.l_ssl, l_cls: report.l_cls, l_total: report.l_total });
            reports.push(report);
        }
        let train_loss = mean(&losses);
        let dev_accuracy = if dev.is_empty() { None } else { Some(accuracy(&params, dev)?) };
        log::info!("stage 2 ({mode}) epoch {epoch}: loss {train_loss:.4} dev acc {dev_accuracy:?}");
        history.push(EpochRecord { epoch, train_loss, dev_accuracy, beta });
        checkpoints.push(params.clone());
    }
    let selection = match (cfg.training.stage2_selection, dev.is_empty()) {
        (Selection::ValAccuracy, true) => Selection::TrainLoss,
        (s, _) => s,
    };
    let selected_epoch = select_checkpoint(&history, selection)?;
    Ok(TrainOutcome { history, log, checkpoints, selected_epoch, step_reports: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, loss: f64, acc: f64) -> EpochRecord {
        EpochRecord { epoch, train_loss: loss, dev_accuracy: Some(acc), beta: 0.2 }
    }

    #[test]
    fn selection_rules() {
        let h = [rec(1, 3.1, 0.7), rec(2, 2.0, 0.9), rec(3, 2.5, 0.9)];
        assert_eq!(select_checkpoint(&h, Selection::TrainLoss).unwrap(), 2);
        assert_eq!(select_checkpoint(&h, Selection::ValAccuracy).unwrap(), 2);
        assert_eq!(select_checkpoint(&h[..1], Selection::TrainLoss).unwrap(), 1);
        assert!(select_checkpoint(&[], Selection::TrainLoss).is_err());
        let no_dev = [EpochRecord { epoch: 1, train_loss: 1.0, dev_accuracy: None, beta: 1.0 }];
        assert!(select_checkpoint(&no_dev, Selection::ValAccuracy).is_err());
    }

    #[test]
    fn log_lines_round_trip() {
        let l = LogLine { epoch: 3, step: 7, l_ssl: 4.25, l_cls: 0.693, l_total: 0.693 + 0.05 * 4.25 };
        let text = l.to_string();
        assert_eq!(text.split('\t').count(), 5);
        assert_eq!(text.parse::<LogLine>().unwrap(), l);
    }

    #[test]
    fn mode_names() {
        for m in StageTwoMode::ALL {
            assert_eq!(m.as_str().parse::<StageTwoMode>().unwrap(), m);
        }
        assert!("nope".parse::<StageTwoMode>().is_err());
    }
}
