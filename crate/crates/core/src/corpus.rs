//! Procedural toy-speech corpus.
//!
//! Bona fide utterances alternate voiced segments (a band-limited harmonic
//! source following a smooth random-walk F0 contour) and unvoiced segments
//! (noise), pass through three speaker-specific resonators and carry a
//! smooth energy envelope. Spoof families deform only the prosody:
//!
//! * `A_flat_pitch`: F0 deviations shrunk to a tenth.
//! * `B_pitch_discontinuity`: instantaneous F0 jumps at unit joins.
//! * `C_cross_speaker_prosody`: another speaker's F0 contour with this
//!   speaker's resonances.
//! * `D_unnatural_expressive`: perfectly periodic sinusoidal F0 swing.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_for, tag, Rng};
use crate::{Error, Result, SAMPLE_RATE, SEGMENT_SAMPLES};

/// Peak amplitude after normalisation.
pub const PEAK: f32 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub base_f0: f64,
    pub f0_variability: f64,
    pub resonance_centers: [f64; 3],
    pub speaking_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "bonafide")]
    Bonafide,
    #[serde(rename = "spoof")]
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Bonafide => "bonafide",
            Label::Spoof => "spoof",
        }
    }

    /// Class index used by the classifier head.
    pub fn class_index(self) -> usize {
        match self {
            Label::Bonafide => 0,
            Label::Spoof => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackFamily {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "A_flat_pitch")]
    FlatPitch,
    #[serde(rename = "B_pitch_discontinuity")]
    PitchDiscontinuity,
    #[serde(rename = "C_cross_speaker_prosody")]
    CrossSpeakerProsody,
    #[serde(rename = "D_unnatural_expressive")]
    UnnaturalExpressive,
}

impl AttackFamily {
    pub const SPOOFS: [AttackFamily; 4] = [
        AttackFamily::FlatPitch,
        AttackFamily::PitchDiscontinuity,
        AttackFamily::CrossSpeakerProsody,
        AttackFamily::UnnaturalExpressive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackFamily::None => "none",
            AttackFamily::FlatPitch => "A_flat_pitch",
            AttackFamily::PitchDiscontinuity => "B_pitch_discontinuity",
            AttackFamily::CrossSpeakerProsody => "C_cross_speaker_prosody",
            AttackFamily::UnnaturalExpressive => "D_unnatural_expressive",
        }
    }

    pub fn label(self) -> Label {
        match self {
            AttackFamily::None => Label::Bonafide,
            _ => Label::Spoof,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "stage1_real")]
    Stage1Real,
    #[serde(rename = "stage2_train")]
    Stage2Train,
    #[serde(rename = "stage2_dev")]
    Stage2Dev,
    #[serde(rename = "eval_seen")]
    EvalSeen,
    #[serde(rename = "eval_expressive_shift")]
    EvalExpressiveShift,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Stage1Real,
        Split::Stage2Train,
        Split::Stage2Dev,
        Split::EvalSeen,
        Split::EvalExpressiveShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Stage1Real => "stage1_real",
            Split::Stage2Train => "stage2_train",
            Split::Stage2Dev => "stage2_dev",
            Split::EvalSeen => "eval_seen",
            Split::EvalExpressiveShift => "eval_expressive_shift",
        }
    }
}

macro_rules! impl_str_enum {
    ($ty:ty, $all:expr, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $all.into_iter()
                    .find(|v| v.as_str() == s)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown {} '{}'", $what, s)))
            }
        }
    };
}

impl_str_enum!(Label, [Label::Bonafide, Label::Spoof], "label");
impl_str_enum!(
    AttackFamily,
    [
        AttackFamily::None,
        AttackFamily::FlatPitch,
        AttackFamily::PitchDiscontinuity,
        AttackFamily::CrossSpeakerProsody,
        AttackFamily::UnnaturalExpressive
    ],
    "attack family"
);
impl_str_enum!(Split, Split::ALL, "split");

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub samples: Vec<f32>,
    pub label: Label,
    pub attack_family: AttackFamily,
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:03}")
}

pub fn gen_speaker_profile(seed: u64, speaker_index: u64) -> SpeakerProfile {
    let mut rng = rng_for(seed, &[tag::SPEAKER, speaker_index]);
    let base_f0: f64 = rng.gen_range(90.0..300.0);
    // Larger vocal tracts go with lower voices; the link is loose.
    let size = (base_f0 - 90.0) / 210.0;
    let scale = 0.85 + 0.3 * size + rng.gen_range(-0.08..0.08);
    let f1 = 500.0 * scale + rng.gen_range(-80.0..80.0);
    let f2 = 1500.0 * scale + rng.gen_range(-200.0..200.0);
    let f3 = f2 + scale * rng.gen_range(800.0..1300.0);
    SpeakerProfile {
        speaker_id: speaker_id(speaker_index as usize),
        base_f0: base_f0.clamp(80.0, 400.0),
        f0_variability: rng.gen_range(0.08..0.16),
        resonance_centers: [f1, f2, f3],
        speaking_rate: rng.gen_range(3.0..5.0),
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start: usize,
    end: usize,
    voiced: bool,
    gain: f64,
}

fn plan_segments(profile: &SpeakerProfile, rng: &mut Rng) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut t = 0usize;
    let mut voiced = rng.gen_bool(0.6);
    let mean = SAMPLE_RATE as f64 / profile.speaking_rate;
    while t < SEGMENT_SAMPLES {
        let dur = if voiced {
            mean * rng.gen_range(0.7..1.5)
        } else {
            mean * rng.gen_range(0.2..0.45)
        };
        let end = (t + dur as usize).min(SEGMENT_SAMPLES);
        segments.push(Segment {
            start: t,
            end,
            voiced,
            gain: if voiced { rng.gen_range(0.55..1.0) } else { rng.gen_range(0.12..0.25) },
        });
        t = end;
        voiced = !voiced;
    }
    segments
}

/// Control-rate step of the F0 contour in samples (5 ms).
const CONTROL_STEP: usize = 80;
const CONTROL_POINTS: usize = SEGMENT_SAMPLES / CONTROL_STEP + 1;

/// Unit-variance Ornstein-Uhlenbeck walk at control rate.
fn random_walk(rng: &mut Rng) -> Vec<f64> {
    let dt = CONTROL_STEP as f64 / SAMPLE_RATE as f64;
    let rho = (-dt / 0.15).exp();
    let innovation = (1.0 - rho * rho).sqrt();
    let mut w = Vec::with_capacity(CONTROL_POINTS);
    let mut x = standard_normal(rng);
    for _ in 0..CONTROL_POINTS {
        w.push(x);
        x = rho * x + innovation * standard_normal(rng);
    }
    w
}

fn standard_normal(rng: &mut Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn natural_contour(base: f64, variability: f64, walk: &[f64]) -> Vec<f64> {
    walk.iter().map(|w| base * (1.0 + variability * w)).collect()
}

fn contour_for(
    profile: &SpeakerProfile,
    family: AttackFamily,
    cross: Option<&SpeakerProfile>,
    segments: &[Segment],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let walk = random_walk(rng);
    let base = profile.base_f0;
    let contour = match family {
        AttackFamily::None => natural_contour(base, profile.f0_variability, &walk),
        AttackFamily::FlatPitch => natural_contour(base, 0.1 * profile.f0_variability, &walk),
        AttackFamily::PitchDiscontinuity => {
            let mut c = natural_contour(base, profile.f0_variability, &walk);
            let joins = unit_joins(segments, rng);
            let mut offset = 0.0;
            let mut next = 0;
            for (k, v) in c.iter_mut().enumerate() {
                let sample = k * CONTROL_STEP;
                while next < joins.len() && sample >= joins[next] {
                    let magnitude = base * rng.gen_range(0.32..0.45);
                    // Alternate up/down so the contour stays in range.
                    offset = if offset > 0.0 { offset - magnitude } else { offset + magnitude };
                    next += 1;
                }
                *v += offset;
            }
            c
        }
        AttackFamily::CrossSpeakerProsody => {
            let source = cross.ok_or(Error::CrossSpeakerSourceRequired)?;
            if source.speaker_id == profile.speaker_id {
                return Err(Error::CrossSpeakerSourceRequired);
            }
            natural_contour(source.base_f0, source.f0_variability, &walk)
        }
        AttackFamily::UnnaturalExpressive => {
            let rate = rng.gen_range(1.5..3.0);
            let phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            (0..CONTROL_POINTS)
                .map(|k| {
                    let t = (k * CONTROL_STEP) as f64 / SAMPLE_RATE as f64;
                    base * (1.0 + 0.4 * (2.0 * std::f64::consts::PI * rate * t + phase).sin())
                })
                .collect()
        }
    };
    Ok(contour.into_iter().map(|f| f.clamp(60.0, 480.0)).collect())
}

/// Join points inside voiced segments (at least two).
fn unit_joins(segments: &[Segment], rng: &mut Rng) -> Vec<usize> {
    let mut voiced: Vec<&Segment> = segments.iter().filter(|s| s.voiced && s.end - s.start > 1600).collect();
    if voiced.is_empty() {
        voiced = segments.iter().filter(|s| s.voiced).collect();
    }
    let mut joins: Vec<usize> = voiced
        .iter()
        .map(|s| s.start + ((s.end - s.start) as f64 * rng.gen_range(0.3..0.7)) as usize)
        .collect();
    if joins.len() < 2 {
        let (start, end) = voiced.first().map(|s| (s.start, s.end)).unwrap_or((0, SEGMENT_SAMPLES));
        let len = (end - start) as f64;
        joins = vec![start + (len * 0.3) as usize, start + (len * 0.65) as usize];
    }
    joins.sort_unstable();
    joins
}

/// Two-pole resonator in the Klatt form.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(center: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let c = -(-2.0 * std::f64::consts::PI * bandwidth / fs).exp();
        let b = 2.0 * (-std::f64::consts::PI * bandwidth / fs).exp() * (2.0 * std::f64::consts::PI * center / fs).cos();
        Self { a: 1.0 - b - c, b, c, y1: 0.0, y2: 0.0 }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

const BANDWIDTHS: [f64; 3] = [90.0, 110.0, 170.0];
const RAMP: usize = 240;
const FRICATIVE_GAIN: f64 = 0.1;

fn envelope(segments: &[Segment]) -> (Vec<f64>, Vec<bool>) {
    let mut env = vec![0.0; SEGMENT_SAMPLES];
    let mut voiced = vec![false; SEGMENT_SAMPLES];
    for s in segments {
        let len = s.end - s.start;
        let ramp = RAMP.min(len / 2).max(1);
        for i in s.start..s.end {
            let from_start = i - s.start;
            let to_end = s.end - 1 - i;
            let edge = from_start.min(to_end);
            let w = if edge < ramp {
                0.5 - 0.5 * (std::f64::consts::PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            env[i] = s.gain * w;
            voiced[i] = s.voiced;
        }
    }
    (env, voiced)
}

/// Renders one utterance. `cross_source` supplies the F0 donor for
/// `C_cross_speaker_prosody` and is ignored otherwise.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    attack_family: AttackFamily,
    rng_seed: u64,
    cross_source: Option<&SpeakerProfile>,
) -> Result<Utterance> {
    let mut rng = rng_for(rng_seed, &[tag::UTTERANCE]);
    let segments = plan_segments(profile, &mut rng);
    let contour = contour_for(profile, attack_family, cross_source, &segments, &mut rng)?;
    let (env, voiced) = envelope(&segments);

    let fs = SAMPLE_RATE as f64;
    let mut resonators: Vec<Resonator> = profile
        .resonance_centers
        .iter()
        .zip(BANDWIDTHS)
        .map(|(&f, bw)| Resonator::new(f, bw))
        .collect();

    let mut phase = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let mut out = Vec::with_capacity(SEGMENT_SAMPLES);
    let mut prev_noise = 0.0;
    for i in 0..SEGMENT_SAMPLES {
        let k = i / CONTROL_STEP;
        let frac = (i % CONTROL_STEP) as f64 / CONTROL_STEP as f64;
        let f0 = contour[k] + (contour[(k + 1).min(CONTROL_POINTS - 1)] - contour[k]) * frac;
        phase = (phase + 2.0 * std::f64::consts::PI * f0 / fs) % (2.0 * std::f64::consts::PI);
        let noise = rng.gen_range(-1.0..1.0);
        // Unvoiced frames skip the resonators: through the narrow first one
        // the noise turns quasi-periodic and reads as voiced.
        let (excitation, fricative) = if voiced[i] {
            (harmonic_source(phase, f0) + 0.03 * noise, 0.0)
        } else {
            (0.0, FRICATIVE_GAIN * (noise - prev_noise))
        };
        prev_noise = noise;
        let mut y = excitation * env[i];
        for r in resonators.iter_mut() {
            y = r.tick(y);
        }
        out.push(y + fricative * env[i]);
    }

    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let gain = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    let samples = out.iter().map(|x| (x * gain) as f32).collect();
    Ok(Utterance {
        utterance_id: format!("{}_s{}", profile.speaker_id, rng_seed),
        speaker_id: profile.speaker_id.clone(),
        samples,
        label: attack_family.label(),
        attack_family,
    })
}

/// Band-limited sawtooth-like source: harmonics at 1/k amplitude, tapered
/// between 3.5 and 4 kHz. Harmonics come from the Chebyshev recurrence.
fn harmonic_source(phase: f64, f0: f64) -> f64 {
    let max_k = (4000.0 / f0) as usize;
    let (s1, c1) = phase.sin_cos();
    let two_c = 2.0 * c1;
    let (mut prev, mut cur) = (0.0, s1);
    let mut acc = 0.0;
    for k in 1..=max_k {
        let fk = k as f64 * f0;
        let taper = if fk < 3500.0 { 1.0 } else { (4000.0 - fk) / 500.0 };
        acc += taper * cur / k as f64;
        let next = two_c * cur - prev;
        prev = cur;
        cur = next;
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitProportions {
    pub stage1_real: f64,
    pub stage2_train: f64,
    pub stage2_dev: f64,
    pub eval_seen: f64,
    pub eval_expressive_shift: f64,
}

impl Default for SplitProportions {
    fn default() -> Self {
        Self {
            stage1_real: 0.3,
            stage2_train: 0.3,
            stage2_dev: 0.1,
            eval_seen: 0.1,
            eval_expressive_shift: 0.2,
        }
    }
}

impl SplitProportions {
    fn get(&self, split: Split) -> f64 {
        match split {
            Split::Stage1Real => self.stage1_real,
            Split::Stage2Train => self.stage2_train,
            Split::Stage2Dev => self.stage2_dev,
            Split::EvalSeen => self.eval_seen,
            Split::EvalExpressiveShift => self.eval_expressive_shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub split_proportions: SplitProportions,
    /// Fraction of spoofed utterances in every split except `stage1_real`.
    pub spoof_fraction: f64,
    pub train_attacks: Vec<AttackFamily>,
    pub shift_attacks: Vec<AttackFamily>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 20,
            utterances_per_speaker: 20,
            split_proportions: SplitProportions::default(),
            spoof_fraction: 0.5,
            train_attacks: vec![AttackFamily::FlatPitch, AttackFamily::PitchDiscontinuity],
            shift_attacks: vec![AttackFamily::CrossSpeakerProsody, AttackFamily::UnnaturalExpressive],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speakers < 2 {
            return Err(Error::TooFewSpeakers(self.speakers));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::InvalidArgument("utterances_per_speaker must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.spoof_fraction) {
            return Err(Error::InvalidArgument("spoof_fraction must lie in [0, 1]".into()));
        }
        let total: f64 = Split::ALL.iter().map(|&s| self.split_proportions.get(s)).sum();
        if Split::ALL.iter().any(|&s| self.split_proportions.get(s) < 0.0) || total <= 0.0 {
            return Err(Error::InvalidArgument("split proportions must be non-negative with a positive sum".into()));
        }
        let spoof_attack = |f: &AttackFamily| *f != AttackFamily::None;
        if self.train_attacks.is_empty() || !self.train_attacks.iter().all(spoof_attack) {
            return Err(Error::InvalidArgument("train_attacks must be non-empty spoof families".into()));
        }
        if self.shift_attacks.is_empty() || !self.shift_attacks.iter().all(spoof_attack) {
            return Err(Error::InvalidArgument("shift_attacks must be non-empty spoof families".into()));
        }
        if self.shift_attacks.iter().any(|f| self.train_attacks.contains(f)) {
            return Err(Error::InvalidArgument("shift_attacks must be withheld from train_attacks".into()));
        }
        Ok(())
    }

    /// Utterance count per split for one speaker; rounding remainders go to
    /// `stage1_real`.
    pub fn per_speaker_counts(&self) -> BTreeMap<Split, usize> {
        let total: f64 = Split::ALL.iter().map(|&s| self.split_proportions.get(s)).sum();
        let n = self.utterances_per_speaker;
        let mut counts = BTreeMap::new();
        let mut used = 0;
        for &split in &Split::ALL[1..] {
            let c = (n as f64 * self.split_proportions.get(split) / total).round() as usize;
            let c = c.min(n - used);
            used += c;
            counts.insert(split, c);
        }
        counts.insert(Split::Stage1Real, n - used);
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub label: Label,
    pub attack_family: AttackFamily,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const AUDIO_DIR: &str = "audio";

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.utterance_id, e.speaker_id, e.label, e.attack_family, e.split
            ));
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_string(),
                msg: format!("line {}: {}", lineno + 1, msg),
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
            }
            let label: Label = fields[2].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            let attack_family: AttackFamily = fields[3].parse().map_err(|e: Error| parse_err(e.to_string()))?;
            if attack_family.label() != label {
                return Err(parse_err("label and attack family disagree".into()));
            }
            entries.push(ManifestEntry {
                utterance_id: fields[0].to_string(),
                speaker_id: fields[1].to_string(),
                label,
                attack_family,
                split: fields[4].parse().map_err(|e: Error| parse_err(e.to_string()))?,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

pub fn audio_path(corpus_dir: &Path, utterance_id: &str) -> PathBuf {
    corpus_dir.join(AUDIO_DIR).join(format!("{utterance_id}.f32"))
}

pub fn encode_audio(samples: &[f32]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

pub fn decode_audio(bytes: &[u8], origin: &str) -> Result<Vec<f32>> {
    if bytes.len() != SEGMENT_SAMPLES * 4 {
        return Err(Error::Parse {
            path: origin.to_string(),
            msg: format!("expected {} bytes of binary32 audio, got {}", SEGMENT_SAMPLES * 4, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_audio(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_audio(&bytes, &path.display().to_string())
}

/// Planned utterance before rendering.
#[derive(Debug, Clone)]
struct Plan {
    entry: ManifestEntry,
    speaker: usize,
    cross: Option<usize>,
    seed: u64,
}

fn plan_corpus(config: &CorpusConfig, seed: u64, profiles: &[SpeakerProfile]) -> Vec<Plan> {
    let counts = config.per_speaker_counts();
    let mut plans = Vec::new();
    for (s, profile) in profiles.iter().enumerate() {
        let mut rng = rng_for(seed, &[tag::SPLIT, s as u64]);
        let mut slot = 0usize;
        for &split in &Split::ALL {
            let n = counts[&split];
            let (n_spoof, attacks) = match split {
                Split::Stage1Real => (0, &config.train_attacks),
                Split::EvalExpressiveShift => ((n as f64 * config.spoof_fraction).round() as usize, &config.shift_attacks),
                _ => ((n as f64 * config.spoof_fraction).round() as usize, &config.train_attacks),
            };
            // Rotate attack families across speakers so every family appears.
            let offset = s % attacks.len();
            for j in 0..n {
                let family = if j < n_spoof {
                    attacks[(offset + j) % attacks.len()]
                } else {
                    AttackFamily::None
                };
                let cross = (family == AttackFamily::CrossSpeakerProsody).then(|| cross_partner(s, profiles, &mut rng));
                plans.push(Plan {
                    entry: ManifestEntry {
                        utterance_id: format!("{}_u{:02}", profile.speaker_id, slot),
                        speaker_id: profile.speaker_id.clone(),
                        label: family.label(),
                        attack_family: family,
                        split,
                    },
                    speaker: s,
                    cross,
                    seed: derive_seed(seed, &[tag::UTTERANCE, s as u64, slot as u64]),
                });
                slot += 1;
            }
        }
    }
    plans
}

/// Picks an F0 donor whose base pitch differs markedly from the target
/// speaker's, so the transferred contour does not fit the voice.
fn cross_partner(s: usize, profiles: &[SpeakerProfile], rng: &mut Rng) -> usize {
    let base = profiles[s].base_f0;
    let far: Vec<usize> = (0..profiles.len())
        .filter(|&o| o != s && (profiles[o].base_f0 / base).ln().abs() > 0.25)
        .collect();
    if far.is_empty() {
        let o = rng.gen_range(0..profiles.len() - 1);
        if o >= s {
            o + 1
        } else {
            o
        }
    } else {
        far[rng.gen_range(0..far.len())]
    }
}

/// Generates the corpus in memory.
pub fn generate(config: &CorpusConfig, seed: u64) -> Result<(Manifest, Vec<Utterance>)> {
    config.validate()?;
    let profiles: Vec<SpeakerProfile> = (0..config.speakers)
        .map(|i| gen_speaker_profile(seed, i as u64))
        .collect();
    let plans = plan_corpus(config, seed, &profiles);
    let utterances = plans
        .par_iter()
        .map(|p| {
            let cross = p.cross.map(|c| &profiles[c]);
            let mut u = synth_utterance(&profiles[p.speaker], p.entry.attack_family, p.seed, cross)?;
            u.utterance_id = p.entry.utterance_id.clone();
            Ok(u)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        entries: plans.into_iter().map(|p| p.entry).collect(),
    };
    Ok((manifest, utterances))
}

/// Generates the corpus and writes `manifest.tsv` plus `audio/<id>.f32`
/// under `out_dir`.
pub fn gen_corpus(config: &CorpusConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let (manifest, utterances) = generate(config, seed)?;
    let audio_dir = out_dir.join(AUDIO_DIR);
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    for u in &utterances {
        let path = audio_path(out_dir, &u.utterance_id);
        fs::write(&path, encode_audio(&u.samples)).map_err(|e| Error::io(&path, e))?;
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prosody::{extract_features, PitchConfig};

    fn voiced_f0(samples: &[f32]) -> Vec<f64> {
        extract_features(samples, &PitchConfig::default())
            .unwrap()
            .into_iter()
            .filter(|f| f.voiced)
            .map(|f| f.f0)
            .collect()
    }

    /// 1.4826 x median absolute deviation.
    fn robust_std(v: &[f64]) -> f64 {
        let median = |mut x: Vec<f64>| {
            x.sort_by(f64::total_cmp);
            let n = x.len();
            if n % 2 == 1 { x[n / 2] } else { 0.5 * (x[n / 2 - 1] + x[n / 2]) }
        };
        let m = median(v.to_vec());
        1.4826 * median(v.iter().map(|x| (x - m).abs()).collect())
    }

    #[test]
    fn profiles_are_deterministic_and_distinct() {
        assert_eq!(gen_speaker_profile(7, 0), gen_speaker_profile(7, 0));
        assert_ne!(gen_speaker_profile(7, 0).base_f0, gen_speaker_profile(7, 1).base_f0);
        for i in 0..200 {
            let p = gen_speaker_profile(3, i);
            assert!((80.0..=400.0).contains(&p.base_f0));
            assert!(p.resonance_centers[0] < p.resonance_centers[1]);
            assert!(p.resonance_centers[1] < p.resonance_centers[2]);
            assert!(p.speaking_rate > 0.0);
        }
    }

    #[test]
    fn bonafide_length_peak_and_pitch() {
        let mut profile = gen_speaker_profile(7, 0);
        profile.base_f0 = 220.0;
        for seed in 0..4 {
            let u = synth_utterance(&profile, AttackFamily::None, seed, None).unwrap();
            assert_eq!(u.samples.len(), SEGMENT_SAMPLES);
            let peak = u.samples.iter().fold(0.0f32, |m, x| m.max(x.abs()));
            assert!((peak - 0.9).abs() <= 1e-6);
            assert_eq!(u.label, Label::Bonafide);
            let f0 = voiced_f0(&u.samples);
            let mean = f0.iter().sum::<f64>() / f0.len() as f64;
            assert!((mean - 220.0).abs() <= 22.0, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn flat_pitch_shrinks_f0_spread() {
        for speaker in 0..4 {
            let profile = gen_speaker_profile(11, speaker);
            let bona = synth_utterance(&profile, AttackFamily::None, 5, None).unwrap();
            let flat = synth_utterance(&profile, AttackFamily::FlatPitch, 5, None).unwrap();
            // robust spread: a handful of segment-boundary frames lock onto
            // resonator ringing instead of the contour
            let (sb, sf) = (robust_std(&voiced_f0(&bona.samples)), robust_std(&voiced_f0(&flat.samples)));
            assert!(sf < 0.2 * sb, "speaker {speaker}: {sf} vs {sb}");
        }
    }

    #[test]
    fn discontinuity_has_jumps() {
        let profile = gen_speaker_profile(11, 2);
        let u = synth_utterance(&profile, AttackFamily::PitchDiscontinuity, 9, None).unwrap();
        let feats = extract_features(&u.samples, &PitchConfig::default()).unwrap();
        let jumps = feats
            .windows(2)
            .filter(|w| w[0].voiced && w[1].voiced && (w[1].f0 - w[0].f0).abs() >= 0.25 * profile.base_f0)
            .count();
        assert!(jumps >= 2, "{jumps}");
    }

    #[test]
    fn cross_speaker_needs_source() {
        let x = gen_speaker_profile(1, 0);
        let y = gen_speaker_profile(1, 1);
        assert!(matches!(
            synth_utterance(&x, AttackFamily::CrossSpeakerProsody, 0, None),
            Err(Error::CrossSpeakerSourceRequired)
        ));
        let u = synth_utterance(&x, AttackFamily::CrossSpeakerProsody, 0, Some(&y)).unwrap();
        assert_eq!(u.speaker_id, x.speaker_id);
    }

    #[test]
    fn default_split_counts() {
        let counts = CorpusConfig::default().per_speaker_counts();
        assert_eq!(counts.values().sum::<usize>(), 20);
        assert_eq!(counts[&Split::Stage1Real], 6);
        assert_eq!(counts[&Split::EvalExpressiveShift], 4);
    }

    #[test]
    fn too_few_speakers_is_rejected() {
        let cfg = CorpusConfig { speakers: 1, ..Default::default() };
        assert!(matches!(generate(&cfg, 1), Err(Error::TooFewSpeakers(1))));
    }

    #[test]
    fn manifest_round_trips_and_rejects_garbage() {
        let m = Manifest {
            entries: vec![ManifestEntry {
                utterance_id: "spk000_u00".into(),
                speaker_id: "spk000".into(),
                label: Label::Spoof,
                attack_family: AttackFamily::UnnaturalExpressive,
                split: Split::EvalExpressiveShift,
            }],
        };
        assert_eq!(Manifest::parse(&m.to_tsv(), "x").unwrap(), m);
        assert!(Manifest::parse("a\tb\tbonafide\tA_flat_pitch\tstage1_real\n", "x").is_err());
        assert!(Manifest::parse("a\tb\tbonafide\n", "x").is_err());
    }
}
