//! Loading manifest splits with their audio and target caches.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{audio_path, read_audio, AttackFamily, Label, Manifest, Split, Utterance};
use crate::targets::{cache_path, read_cache, ProsodicTargetSequence};
use crate::{Error, Result};

/// One utterance ready for training or scoring.
#[derive(Debug, Clone)]
pub struct Example {
    pub utterance_id: String,
    pub speaker_id: String,
    pub label: Label,
    pub attack_family: AttackFamily,
    pub samples: Vec<f32>,
    pub targets: Option<ProsodicTargetSequence>,
}

/// Reads the audio (and, when `targets_dir` is given, the target cache) of
/// every manifest entry in `split`, in manifest order.
pub fn load_split(
    corpus_dir: &Path,
    manifest: &Manifest,
    split: Split,
    targets_dir: Option<&Path>,
) -> Result<Vec<Example>> {
    let entries: Vec<_> = manifest.split(split).collect();
    entries
        .par_iter()
        .map(|e| {
            let samples = read_audio(&audio_path(corpus_dir, &e.utterance_id))?;
            let targets = match targets_dir {
                Some(dir) => {
                    let seq = read_cache(&cache_path(dir, &e.utterance_id))?;
                    if seq.speaker_id != e.speaker_id {
                        return Err(Error::InvalidArgument(format!(
                            "target cache for {} names speaker {}, manifest says {}",
                            e.utterance_id, seq.speaker_id, e.speaker_id
                        )));
                    }
                    Some(seq)
                }
                None => None,
            };
            Ok(Example {
                utterance_id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                label: e.label,
                attack_family: e.attack_family,
                samples,
                targets,
            })
        })
        .collect()
}

/// In-memory counterpart of [`load_split`] for a freshly generated corpus.
pub fn split_from_memory(
    manifest: &Manifest,
    utterances: &[Utterance],
    targets: Option<&[ProsodicTargetSequence]>,
    split: Split,
) -> Result<Vec<Example>> {
    let audio: HashMap<&str, &Utterance> = utterances.iter().map(|u| (u.utterance_id.as_str(), u)).collect();
    let cached: HashMap<&str, &ProsodicTargetSequence> =
        targets.unwrap_or(&[]).iter().map(|t| (t.utterance_id.as_str(), t)).collect();
    manifest
        .split(split)
        .map(|e| {
            let u = audio.get(e.utterance_id.as_str()).ok_or_else(|| Error::UnknownUtterance(e.utterance_id.clone()))?;
            let t = match targets {
                Some(_) => Some(
                    (*cached.get(e.utterance_id.as_str()).ok_or_else(|| Error::UnknownUtterance(e.utterance_id.clone()))?)
                        .clone(),
                ),
                None => None,
            };
            Ok(Example {
                utterance_id: e.utterance_id.clone(),
                speaker_id: e.speaker_id.clone(),
                label: e.label,
                attack_family: e.attack_family,
                samples: u.samples.clone(),
                targets: t,
            })
        })
        .collect()
}

/// `[bonafide, spoof]` counts.
pub fn class_counts(examples: &[Example]) -> [usize; 2] {
    let mut c = [0, 0];
    for e in examples {
        c[e.label.class_index()] += 1;
    }
    c
}
