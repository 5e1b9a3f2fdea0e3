//! Frame-level pitch, voicing and energy, and their 256-d sinusoidal encoding.
//!
//! Pitch is estimated with a normalised cross-correlation over the lag range
//! of the search band. The correlation window is the 400-sample frame; the
//! lagged copy reads into the samples that follow the frame, so long periods
//! are measured over a full window.

use serde::{Deserialize, Serialize};

use crate::{Error, Result, FRAMES, HOP_SAMPLES, PROSODY_DIM, SAMPLE_RATE, SEGMENT_SAMPLES, WINDOW_SAMPLES};

/// Floor applied to frame RMS before taking the log.
pub const ENERGY_FLOOR: f64 = 1e-6;

/// Default log-F0 statistics for utterances without voiced frames.
pub const DEFAULT_F0_HZ: f64 = 150.0;
pub const DEFAULT_LOG_F0_STD: f64 = 0.3;

const F0_DIMS: usize = 85;
const VOICING_DIMS: usize = 86;
const ENERGY_DIMS: usize = 85;

/// Dimension ranges of the three channels inside a [`ProsodicEmbedding`].
pub const F0_RANGE: std::ops::Range<usize> = 0..F0_DIMS;
pub const VOICING_RANGE: std::ops::Range<usize> = F0_DIMS..F0_DIMS + VOICING_DIMS;
pub const ENERGY_RANGE: std::ops::Range<usize> = F0_DIMS + VOICING_DIMS..F0_DIMS + VOICING_DIMS + ENERGY_DIMS;
const _: () = assert!(F0_DIMS + VOICING_DIMS + ENERGY_DIMS == PROSODY_DIM);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PitchConfig {
    pub min_f0: f64,
    pub max_f0: f64,
    /// Minimum normalised correlation peak for a voiced decision.
    pub voicing_threshold: f64,
    /// Minimum frame RMS for a voiced decision.
    pub energy_gate: f64,
    /// A shorter-lag peak is preferred when it reaches this fraction of the
    /// best peak (guards against picking a multiple of the period).
    pub octave_ratio: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self {
            min_f0: 60.0,
            max_f0: 500.0,
            voicing_threshold: 0.5,
            energy_gate: 1e-4,
            octave_ratio: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameFeatures {
    /// Hz, 0 when unvoiced.
    pub f0: f64,
    pub voiced: bool,
    pub log_energy: f64,
}

/// Per-utterance normalisation statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProsodyStats {
    pub log_f0_mean: f64,
    pub log_f0_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    /// True when the utterance had no voiced frame and default F0 stats apply.
    pub default_f0: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProsodicEmbedding(pub Vec<f64>);

impl ProsodicEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Splits a 4 s segment into 200 windows of 400 samples with a 320-sample
/// hop, zero-padding past the end.
pub fn frame_signal(samples: &[f32]) -> Result<Vec<Vec<f64>>> {
    check_len(samples)?;
    Ok((0..FRAMES)
        .map(|k| window_at(samples, k * HOP_SAMPLES, WINDOW_SAMPLES))
        .collect())
}

fn check_len(samples: &[f32]) -> Result<()> {
    if samples.len() != SEGMENT_SAMPLES {
        return Err(Error::InvalidLength {
            expected: SEGMENT_SAMPLES,
            actual: samples.len(),
        });
    }
    Ok(())
}

fn window_at(samples: &[f32], start: usize, len: usize) -> Vec<f64> {
    (start..start + len)
        .map(|i| samples.get(i).copied().unwrap_or(0.0) as f64)
        .collect()
}

pub fn frame_rms(frame: &[f64]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    (frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64).sqrt()
}

/// `ln(max(RMS, 1e-6))`.
pub fn frame_energy(frame: &[f64]) -> f64 {
    frame_rms(frame).max(ENERGY_FLOOR).ln()
}

fn lag_bounds(config: &PitchConfig) -> (usize, usize) {
    let min_lag = (SAMPLE_RATE as f64 / config.max_f0).floor().max(2.0) as usize;
    let max_lag = (SAMPLE_RATE as f64 / config.min_f0).ceil() as usize;
    (min_lag, max_lag)
}

/// Number of samples after the frame that [`estimate_f0`] reads as context.
pub fn context_len(config: &PitchConfig) -> usize {
    lag_bounds(config).1 + 1
}

/// Estimates F0 of `frame`, reading lagged samples from `context` (the
/// samples that follow the frame; missing samples count as zero).
///
/// Returns `(f0, voiced)`, with `f0 == 0` whenever the frame is unvoiced.
pub fn estimate_f0(frame: &[f64], context: &[f64], config: &PitchConfig) -> (f64, bool) {
    let n = frame.len();
    if n == 0 || frame_rms(frame) < config.energy_gate {
        return (0.0, false);
    }
    let (min_lag, max_lag) = lag_bounds(config);
    let at = |i: usize| -> f64 {
        if i < n {
            frame[i]
        } else {
            context.get(i - n).copied().unwrap_or(0.0)
        }
    };

    let e0: f64 = frame.iter().map(|x| x * x).sum();
    // Energy of the lagged window, updated incrementally.
    let lo = min_lag - 1;
    let hi = max_lag + 1;
    let mut e_lag: f64 = (lo..lo + n).map(|i| at(i) * at(i)).sum();
    let mut corr = vec![0.0; hi + 1];
    for lag in lo..=hi {
        if lag > lo {
            let out = at(lag - 1);
            let inn = at(lag + n - 1);
            e_lag += inn * inn - out * out;
        }
        let num: f64 = (0..n).map(|i| frame[i] * at(i + lag)).sum();
        let den = (e0 * e_lag.max(0.0)).sqrt();
        corr[lag] = if den > 0.0 { num / den } else { 0.0 };
    }

    let peaks: Vec<usize> = (min_lag..=max_lag)
        .filter(|&l| corr[l] >= corr[l - 1] && corr[l] > corr[l + 1])
        .collect();
    let Some(best) = peaks
        .iter()
        .map(|&l| corr[l])
        .max_by(|a, b| a.total_cmp(b))
    else {
        return (0.0, false);
    };
    let lag = peaks
        .iter()
        .copied()
        .find(|&l| corr[l] >= config.octave_ratio * best)
        .unwrap_or(peaks[0]);
    let peak = corr[lag];
    if peak < config.voicing_threshold {
        return (0.0, false);
    }

    let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
    let denom = a - 2.0 * b + c;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let f0 = (SAMPLE_RATE as f64 / (lag as f64 + shift)).clamp(config.min_f0, config.max_f0);
    (f0, true)
}

/// Per-frame pitch, voicing and energy over a full 4 s segment.
pub fn extract_features(samples: &[f32], config: &PitchConfig) -> Result<Vec<FrameFeatures>> {
    check_len(samples)?;
    let ctx = context_len(config);
    Ok((0..FRAMES)
        .map(|k| {
            let start = k * HOP_SAMPLES;
            let frame = window_at(samples, start, WINDOW_SAMPLES);
            let context = window_at(samples, start + WINDOW_SAMPLES, ctx);
            let (f0, voiced) = estimate_f0(&frame, &context, config);
            FrameFeatures {
                f0,
                voiced,
                log_energy: frame_energy(&frame),
            }
        })
        .collect())
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let n = values.clone().count();
    if n == 0 {
        return None;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

const MIN_STD: f64 = 1e-3;

pub fn utterance_stats(features: &[FrameFeatures]) -> ProsodyStats {
    let voiced = features.iter().filter(|f| f.voiced).map(|f| f.f0.ln());
    let (log_f0_mean, log_f0_std, default_f0) = match mean_std(voiced) {
        Some((m, s)) => (m, s.max(MIN_STD), false),
        None => {
            log::warn!("utterance has no voiced frames; using default F0 statistics");
            (DEFAULT_F0_HZ.ln(), DEFAULT_LOG_F0_STD, true)
        }
    };
    let (energy_mean, energy_std) =
        mean_std(features.iter().map(|f| f.log_energy)).unwrap_or((ENERGY_FLOOR.ln(), 1.0));
    ProsodyStats {
        log_f0_mean,
        log_f0_std,
        energy_mean,
        energy_std: energy_std.max(MIN_STD),
        default_f0,
    }
}

const OMEGA_MIN: f64 = 0.25;
const OMEGA_MAX: f64 = 8.0;

/// Amplitude of every sinusoid; 128 sin/cos pairs give a vector of norm ~1,
/// comparable to the unit-norm speaker block of a target row.
fn amplitude() -> f64 {
    (1.0 / (PROSODY_DIM as f64 / 2.0)).sqrt()
}

/// Expands a scalar into `out.len()` dims: sin/cos pairs at geometrically
/// spaced frequencies, plus a bounded `tanh` term when the width is odd.
fn expand_channel(x: f64, out: &mut [f64]) {
    let a = amplitude();
    let pairs = out.len() / 2;
    for k in 0..pairs {
        let frac = if pairs > 1 { k as f64 / (pairs - 1) as f64 } else { 0.0 };
        let omega = OMEGA_MIN * (OMEGA_MAX / OMEGA_MIN).powf(frac);
        out[2 * k] = a * (omega * x).sin();
        out[2 * k + 1] = a * (omega * x).cos();
    }
    if out.len() % 2 == 1 {
        out[out.len() - 1] = a * x.tanh();
    }
}

/// Upper bound on `|d embedding / d channel|` in the L2 norm.
pub fn lipschitz_bound() -> f64 {
    amplitude() * OMEGA_MAX * ((VOICING_DIMS / 2) as f64).sqrt()
}

/// The three scalar channels of a frame: z-scored log-F0 (0 when unvoiced),
/// voicing flag, z-scored log-energy.
pub fn channels(features: &FrameFeatures, stats: &ProsodyStats) -> [f64; 3] {
    let z_f0 = if features.voiced && features.f0 > 0.0 {
        (features.f0.ln() - stats.log_f0_mean) / stats.log_f0_std
    } else {
        0.0
    };
    let voiced = if features.voiced { 1.0 } else { 0.0 };
    let z_energy = (features.log_energy - stats.energy_mean) / stats.energy_std;
    [z_f0, voiced, z_energy]
}

pub fn embed_channels(ch: [f64; 3]) -> ProsodicEmbedding {
    let mut v = vec![0.0; PROSODY_DIM];
    expand_channel(ch[0], &mut v[F0_RANGE]);
    expand_channel(ch[1], &mut v[VOICING_RANGE]);
    expand_channel(ch[2], &mut v[ENERGY_RANGE]);
    ProsodicEmbedding(v)
}

pub fn prosodic_embedding(features: &FrameFeatures, stats: &ProsodyStats) -> ProsodicEmbedding {
    embed_channels(channels(features, stats))
}

/// Embeddings for every frame of a segment.
pub fn utterance_embeddings(samples: &[f32], config: &PitchConfig) -> Result<Vec<ProsodicEmbedding>> {
    let features = extract_features(samples, config)?;
    let stats = utterance_stats(&features);
    Ok(features.iter().map(|f| prosodic_embedding(f, &stats)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tone(freq: f64, amp: f64) -> Vec<f32> {
        (0..SEGMENT_SAMPLES)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn framing_shape_and_hop() {
        let samples: Vec<f32> = (0..SEGMENT_SAMPLES).map(|i| i as f32).collect();
        let frames = frame_signal(&samples).unwrap();
        assert_eq!(frames.len(), 200);
        assert!(frames.iter().all(|f| f.len() == 400));
        assert_eq!(frames[3][0], (3 * 320) as f64);
        // tail frame runs past the end and is zero padded
        assert_eq!(frames[199][0], (199 * 320) as f64);
        assert_eq!(frames[199][399], 0.0);
        assert!(frame_signal(&samples[..100]).is_err());

        let zeros = frame_signal(&vec![0.0; SEGMENT_SAMPLES]).unwrap();
        assert!(zeros.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn energy_examples() {
        assert!((frame_energy(&[0.0; 400]) - (-13.815_510_557_964_274)).abs() < 1e-12);
        assert!((frame_energy(&[0.5; 400]) - 0.5f64.ln()).abs() < 1e-12);
        let f: Vec<f64> = (0..400).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.4).collect();
        let g: Vec<f64> = f.iter().map(|x| 2.0 * x).collect();
        assert!((frame_energy(&g) - frame_energy(&f) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sine_220_is_voiced_at_220() {
        let cfg = PitchConfig::default();
        let feats = extract_features(&tone(220.0, 1.0), &cfg).unwrap();
        for f in &feats[..190] {
            assert!(f.voiced);
            assert!((f.f0 - 220.0).abs() <= 2.0, "{}", f.f0);
        }
    }

    #[test]
    fn noise_and_silence_are_unvoiced() {
        let cfg = PitchConfig::default();
        let mut rng = crate::rng::rng_for(99, &[]);
        // -20 dBFS RMS white noise (uniform with matching RMS)
        let half_width = 0.1 * 3f64.sqrt();
        let noise: Vec<f32> = (0..SEGMENT_SAMPLES)
            .map(|_| rng.gen_range(-half_width..half_width) as f32)
            .collect();
        let feats = extract_features(&noise, &cfg).unwrap();
        assert!(feats.iter().all(|f| !f.voiced && f.f0 == 0.0));

        let silent = extract_features(&vec![0.0; SEGMENT_SAMPLES], &cfg).unwrap();
        assert!(silent.iter().all(|f| !f.voiced && f.f0 == 0.0));
    }

    #[test]
    fn tone_sweep_accuracy() {
        let cfg = PitchConfig::default();
        let mut total = 0;
        let mut good = 0;
        let mut freq = 80.0;
        while freq <= 400.0 {
            for f in extract_features(&tone(freq, 0.8), &cfg).unwrap() {
                if f.voiced {
                    total += 1;
                    if (f.f0 - freq).abs() <= 2.0 {
                        good += 1;
                    }
                }
            }
            freq += 17.5;
        }
        assert!(total > 0);
        assert!(good as f64 >= 0.95 * total as f64, "{good}/{total}");
    }

    #[test]
    fn voicing_monotone_in_amplitude() {
        let cfg = PitchConfig::default();
        for freq in [95.0, 180.0, 310.0] {
            let mut was_voiced = false;
            for exp in -12..=0 {
                let amp = 2f64.powi(exp);
                let samples = tone(freq, amp);
                let frame = window_at(&samples, 1600, WINDOW_SAMPLES);
                let ctx = window_at(&samples, 2000, context_len(&cfg));
                let (_, voiced) = estimate_f0(&frame, &ctx, &cfg);
                assert!(!was_voiced || voiced, "lost voicing at amp {amp}");
                was_voiced = voiced;
            }
            assert!(was_voiced);
        }
    }

    #[test]
    fn embedding_dimension_and_determinism() {
        let stats = ProsodyStats {
            log_f0_mean: 5.0,
            log_f0_std: 0.2,
            energy_mean: -3.0,
            energy_std: 1.0,
            default_f0: false,
        };
        let f = FrameFeatures { f0: 180.0, voiced: true, log_energy: -2.5 };
        let a = prosodic_embedding(&f, &stats);
        let b = prosodic_embedding(&f, &stats);
        assert_eq!(a.0.len(), 256);
        assert_eq!(a, b);
        assert!(a.0.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn voicing_flag_only_touches_voicing_partition() {
        let stats = ProsodyStats {
            log_f0_mean: 150f64.ln(),
            log_f0_std: 0.2,
            energy_mean: -3.0,
            energy_std: 1.0,
            default_f0: false,
        };
        // voiced at exactly the mean F0 has z = 0, same as the unvoiced code
        let voiced = FrameFeatures { f0: 150.0, voiced: true, log_energy: -2.0 };
        let unvoiced = FrameFeatures { f0: 0.0, voiced: false, log_energy: -2.0 };
        let a = prosodic_embedding(&voiced, &stats).0;
        let b = prosodic_embedding(&unvoiced, &stats).0;
        assert_eq!(VOICING_RANGE.len(), 86);
        for i in 0..PROSODY_DIM {
            if VOICING_RANGE.contains(&i) {
                continue;
            }
            assert!((a[i] - b[i]).abs() < 1e-12, "dim {i} changed");
        }
        assert!(VOICING_RANGE.clone().any(|i| (a[i] - b[i]).abs() > 1e-3));
    }

    #[test]
    fn embedding_is_lipschitz_per_channel() {
        let bound = lipschitz_bound();
        let mut rng = crate::rng::rng_for(5, &[]);
        for _ in 0..200 {
            let base = [rng.gen_range(-3.0..3.0), rng.gen_range(0.0..1.0), rng.gen_range(-3.0..3.0)];
            let e0 = embed_channels(base).0;
            for ch in 0..3 {
                let delta = 1e-4;
                let mut moved = base;
                moved[ch] += delta;
                let e1 = embed_channels(moved).0;
                let dist = e0.iter().zip(&e1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(dist <= bound * delta * (1.0 + 1e-6), "{dist} > {}", bound * delta);
            }
        }
    }

    #[test]
    fn unvoiced_utterance_uses_default_stats() {
        let feats = vec![FrameFeatures { f0: 0.0, voiced: false, log_energy: -5.0 }; 200];
        let stats = utterance_stats(&feats);
        assert!(stats.default_f0);
        assert_eq!(stats.log_f0_mean, 150f64.ln());
        assert_eq!(stats.log_f0_std, 0.3);
    }
}
