//! Speaker-conditioned prosodic target sequences and their `PSDT` cache.
//!
//! Row `t` of a target sequence is the unit-norm speaker embedding followed
//! by the prosodic embedding of frame `t`.
//!
//! Cache layout (little endian): magic `PSDT`, version `u16`, `T u32`,
//! `D_s u32`, `D_p u32`, speaker id as `u32` length + UTF-8 bytes, then
//! `T x (D_s + D_p)` binary32 values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::corpus::{audio_path, read_audio, Manifest};
use crate::prosody::{utterance_embeddings, PitchConfig, ProsodicEmbedding};
use crate::speaker::{speaker_embedding, SpeakerEmbedding, SpeakerEncoder};
use crate::{Error, Result, FRAMES, PROSODY_DIM, SPEAKER_DIM, TARGET_DIM};

pub const MAGIC: &[u8; 4] = b"PSDT";
pub const VERSION: u16 = 1;
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProsodicTargetSequence {
    pub speaker_id: String,
    pub utterance_id: String,
    frames: usize,
    rows: Vec<f32>,
}

impl ProsodicTargetSequence {
    /// Builds a sequence from raw rows; used by tests and reduced harnesses
    /// that need fewer than 200 frames.
    pub fn from_rows(speaker_id: impl Into<String>, utterance_id: impl Into<String>, frames: usize, rows: Vec<f32>) -> Result<Self> {
        if rows.len() != frames * TARGET_DIM {
            return Err(Error::DimensionMismatch {
                what: "target rows",
                expected: frames * TARGET_DIM,
                actual: rows.len(),
            });
        }
        Ok(Self {
            speaker_id: speaker_id.into(),
            utterance_id: utterance_id.into(),
            frames,
            rows,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.rows[t * TARGET_DIM..(t + 1) * TARGET_DIM]
    }

    pub fn speaker_block(&self, t: usize) -> &[f32] {
        &self.row(t)[..SPEAKER_DIM]
    }

    pub fn prosody_block(&self, t: usize) -> &[f32] {
        &self.row(t)[SPEAKER_DIM..]
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }
}

/// Concatenates the speaker embedding with every frame's prosodic embedding.
pub fn build_target_sequence(
    spk: &SpeakerEmbedding,
    prosody: &[ProsodicEmbedding],
    speaker_id: &str,
    utterance_id: &str,
) -> Result<ProsodicTargetSequence> {
    if spk.as_slice().len() != SPEAKER_DIM {
        return Err(Error::DimensionMismatch {
            what: "speaker embedding",
            expected: SPEAKER_DIM,
            actual: spk.as_slice().len(),
        });
    }
    if (spk.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("speaker embedding norm {} is not 1", spk.norm())));
    }
    if prosody.len() != FRAMES {
        return Err(Error::DimensionMismatch {
            what: "prosodic frames",
            expected: FRAMES,
            actual: prosody.len(),
        });
    }
    let mut rows = Vec::with_capacity(FRAMES * TARGET_DIM);
    for f in prosody {
        if f.0.len() != PROSODY_DIM {
            return Err(Error::DimensionMismatch {
                what: "prosodic embedding",
                expected: PROSODY_DIM,
                actual: f.0.len(),
            });
        }
        rows.extend(spk.as_slice().iter().map(|&x| x as f32));
        rows.extend(f.0.iter().map(|&x| x as f32));
    }
    ProsodicTargetSequence::from_rows(speaker_id, utterance_id, FRAMES, rows)
}

pub fn encode_cache(seq: &ProsodicTargetSequence) -> Vec<u8> {
    let id = seq.speaker_id.as_bytes();
    let mut out = Vec::with_capacity(22 + id.len() + seq.rows.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.frames as u32).to_le_bytes());
    out.extend_from_slice(&(SPEAKER_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(PROSODY_DIM as u32).to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    for v in &seq.rows {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(self.origin.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a cache image; `utterance_id` is not stored in the format and is
/// supplied by the caller (normally the file stem).
pub fn decode_cache(bytes: &[u8], utterance_id: &str, origin: &str) -> Result<ProsodicTargetSequence> {
    let mut r = Reader { bytes, pos: 0, origin };
    if bytes.len() < 4 || r.take(4)? != MAGIC {
        return Err(Error::BadMagic(origin.to_string()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let frames = r.u32()? as usize;
    let ds = r.u32()? as usize;
    let dp = r.u32()? as usize;
    if ds != SPEAKER_DIM {
        return Err(Error::DimensionMismatch { what: "cache speaker dim", expected: SPEAKER_DIM, actual: ds });
    }
    if dp != PROSODY_DIM {
        return Err(Error::DimensionMismatch { what: "cache prosody dim", expected: PROSODY_DIM, actual: dp });
    }
    let id_len = r.u32()? as usize;
    let speaker_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|e| Error::Parse {
        path: origin.to_string(),
        msg: e.to_string(),
    })?;
    let body = r.take(frames * TARGET_DIM * 4)?;
    if r.pos != bytes.len() {
        return Err(Error::Parse {
            path: origin.to_string(),
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let rows = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ProsodicTargetSequence::from_rows(speaker_id, utterance_id, frames, rows)
}

pub fn write_cache(seq: &ProsodicTargetSequence, path: &Path) -> Result<()> {
    fs::write(path, encode_cache(seq)).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<ProsodicTargetSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    decode_cache(&bytes, stem, &path.display().to_string())
}

pub fn cache_path(targets_dir: &Path, utterance_id: &str) -> PathBuf {
    targets_dir.join(format!("{utterance_id}.psdt"))
}

/// Checks the structural invariant of a target sequence: a constant,
/// unit-norm speaker block on every row.
pub fn check_speaker_block(seq: &ProsodicTargetSequence) -> Result<()> {
    let first = seq.speaker_block(0);
    let n = first.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("{}: speaker block norm {n}", seq.utterance_id)));
    }
    if (1..seq.frames()).any(|t| seq.speaker_block(t) != first) {
        return Err(Error::InvalidArgument(format!("{}: speaker block varies across rows", seq.utterance_id)));
    }
    Ok(())
}

/// Target sequences for an in-memory corpus. Speaker embeddings average all
/// of a speaker's utterances in `utterances`.
pub fn corpus_targets(
    utterances: &[(String, String, Vec<f32>)],
    encoder: &SpeakerEncoder,
    pitch: &PitchConfig,
) -> Result<Vec<ProsodicTargetSequence>> {
    let utt_embs = utterances
        .par_iter()
        .map(|(_, _, samples)| encoder.utterance_embedding(samples))
        .collect::<Result<Vec<_>>>()?;
    let mut by_speaker: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for ((_, spk, _), e) in utterances.iter().zip(utt_embs) {
        by_speaker.entry(spk.as_str()).or_default().push(e);
    }
    let speakers = by_speaker
        .into_iter()
        .map(|(spk, embs)| Ok((spk, speaker_embedding(&embs)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    utterances
        .par_iter()
        .map(|(utt, spk, samples)| {
            let prosody = utterance_embeddings(samples, pitch)?;
            build_target_sequence(&speakers[spk.as_str()], &prosody, spk, utt)
        })
        .collect()
}

/// Reads every utterance in the manifest and writes one `PSDT` cache each.
pub fn extract_corpus_targets(
    corpus_dir: &Path,
    manifest: &Manifest,
    out_dir: &Path,
    encoder: &SpeakerEncoder,
    pitch: &PitchConfig,
) -> Result<usize> {
    let utterances = manifest
        .entries
        .par_iter()
        .map(|e| {
            let samples = read_audio(&audio_path(corpus_dir, &e.utterance_id))?;
            Ok((e.utterance_id.clone(), e.speaker_id.clone(), samples))
        })
        .collect::<Result<Vec<_>>>()?;
    let targets = corpus_targets(&utterances, encoder, pitch)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for t in &targets {
        write_cache(t, &cache_path(out_dir, &t.utterance_id))?;
    }
    Ok(targets.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosody::embed_channels;

    fn unit_speaker() -> SpeakerEmbedding {
        let mut v = vec![0.0; SPEAKER_DIM];
        v[0] = 0.6;
        v[191] = 0.8;
        speaker_embedding(&[v]).unwrap()
    }

    fn prosody() -> Vec<ProsodicEmbedding> {
        (0..FRAMES)
            .map(|t| embed_channels([(t as f64 / 40.0).sin(), (t % 3 == 0) as u8 as f64, t as f64 / 100.0 - 1.0]))
            .collect()
    }

    #[test]
    fn rows_are_speaker_then_prosody() {
        let spk = unit_speaker();
        let pros = prosody();
        let seq = build_target_sequence(&spk, &pros, "spk000", "u0").unwrap();
        assert_eq!(seq.row(0).len(), 448);
        assert_eq!(seq.frames(), 200);
        assert_eq!(seq.speaker_block(0), seq.speaker_block(199));
        for t in [0, 57, 199] {
            let expected: Vec<f32> = pros[t].0.iter().map(|&x| x as f32).collect();
            assert_eq!(seq.prosody_block(t), expected.as_slice());
        }
        check_speaker_block(&seq).unwrap();
    }

    #[test]
    fn build_rejects_bad_dimensions() {
        let spk = unit_speaker();
        let mut pros = prosody();
        pros.pop();
        assert!(matches!(
            build_target_sequence(&spk, &pros, "s", "u"),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut pros = prosody();
        pros[4].0.push(0.0);
        assert!(build_target_sequence(&spk, &pros, "s", "u").is_err());
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let seq = build_target_sequence(&unit_speaker(), &prosody(), "spk003", "spk003_u01").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = cache_path(dir.path(), "spk003_u01");
        write_cache(&seq, &path).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back, seq);
        let bytes = fs::read(&path).unwrap();
        assert_eq!(encode_cache(&back), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_cache(&bad, "u", "x"), Err(Error::BadMagic(_))));
        let cut = &bytes[..bytes.len() - 1000];
        assert!(matches!(decode_cache(cut, "u", "x"), Err(Error::Truncated(_))));
        assert!(matches!(decode_cache(&bytes[..10], "u", "x"), Err(Error::Truncated(_))));

        let mut dim = bytes.clone();
        dim[10..14].copy_from_slice(&100u32.to_le_bytes());
        assert!(matches!(decode_cache(&dim, "u", "x"), Err(Error::DimensionMismatch { .. })));
        let mut ver = bytes;
        ver[4..6].copy_from_slice(&9u16.to_le_bytes());
        assert!(matches!(decode_cache(&ver, "u", "x"), Err(Error::UnsupportedVersion(9))));
    }
}
