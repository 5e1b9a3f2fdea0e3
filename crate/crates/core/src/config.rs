//! Run configuration: one TOML document with a section per module, plus
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, Split};
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;
use crate::prosody::PitchConfig;
use crate::speaker::DEFAULT_EXPANSION_SEED;
use crate::trainer::{MaskingConfig, OptimizerConfig, TrainerConfig, TrainingConfig};
use crate::{Error, Result};

/// File name of the resolved configuration written next to outputs.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    pub expansion_seed: u64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self { expansion_seed: DEFAULT_EXPANSION_SEED }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::EvalExpressiveShift }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus_dir: PathBuf,
    pub targets_dir: PathBuf,
    pub runs_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus_dir: "work/corpus".into(),
            targets_dir: "work/targets".into(),
            runs_dir: "work/runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus generation seed.
    pub seed: u64,
    /// Initialisation, batching, masking, negative sampling and dropout seed.
    pub train_seed: u64,
    pub corpus: CorpusConfig,
    pub pitch: PitchConfig,
    pub speaker: SpeakerConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub masking: MaskingConfig,
    pub objective: ObjectiveConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            train_seed: 1,
            corpus: CorpusConfig::default(),
            pitch: PitchConfig::default(),
            speaker: SpeakerConfig::default(),
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            masking: MaskingConfig::default(),
            objective: ObjectiveConfig::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Parse { path: p.display().to_string(), msg: e.to_string() })?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.trainer().validate()
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            optimizer: self.optimizer.clone(),
            masking: self.masking.clone(),
            objective: self.objective.clone(),
            training: self.training.clone(),
        }
    }

    /// Writes the resolved configuration into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Sets `a.b.c=value`; the value is read as a TOML literal, or as a bare
/// string when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[model]\nhidden = 3").is_err());
        assert!(RunConfig::load(None, &["optimizer.lr = 3".into()]).is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::load(
            None,
            &[
                "model.hidden_dim=32".into(),
                "optimizer.kind=adamw".into(),
                "optimizer.epochs=3".into(),
                "optimizer.epochs=4".into(),
                "objective.class_weights=[1.0, 2.0]".into(),
                "paths.corpus_dir=/tmp/x".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.hidden_dim, 32);
        assert_eq!(cfg.optimizer.epochs, 4);
        assert_eq!(cfg.objective.class_weights, Some([1.0, 2.0]));
        assert_eq!(cfg.paths.corpus_dir, PathBuf::from("/tmp/x"));
        let again = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::load(None, &["model.n_heads=5".into()]).is_err());
        assert!(RunConfig::load(None, &["corpus.speakers=1".into()]).is_err());
        assert!(RunConfig::load(None, &["optimizer.batch_size=1".into()]).is_err());
        assert!(RunConfig::load(None, &["nokey".into()]).is_err());
    }
}
