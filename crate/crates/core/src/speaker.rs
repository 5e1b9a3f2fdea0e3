//! Deterministic 192-d speaker embeddings from log-mel statistics.
//!
//! Each utterance is summarised by per-band mean and standard deviation of
//! 24 log-mel energies (48 numbers, each half centred across bands so the
//! vector describes spectral shape rather than level), then lifted to 192
//! dims by a fixed column-orthonormal matrix. Cosine similarity between
//! embeddings equals cosine similarity between the underlying statistics.

use std::sync::Arc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::rng::{rng_for, tag};
use crate::{Error, Result, FRAMES, HOP_SAMPLES, SAMPLE_RATE, SEGMENT_SAMPLES, SPEAKER_DIM, WINDOW_SAMPLES};

pub const MEL_BANDS: usize = 24;
const STATS_DIM: usize = 2 * MEL_BANDS;
const FFT_LEN: usize = 512;
const LOG_FLOOR: f64 = 1e-10;

/// Default seed of the 48 -> 192 expansion.
pub const DEFAULT_EXPANSION_SEED: u64 = 0x05ee_d192;

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub struct SpeakerEncoder {
    /// Row-major SPEAKER_DIM x STATS_DIM with orthonormal columns.
    expansion: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn mel_filterbank() -> Vec<Vec<(usize, f64)>> {
    let bins = FFT_LEN / 2 + 1;
    let top = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / FFT_LEN as f64;
    (0..MEL_BANDS)
        .map(|b| {
            let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
            (0..bins)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

/// Gaussian matrix orthonormalised column by column (modified Gram-Schmidt).
fn orthonormal_expansion(seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &[tag::EXPANSION]);
    let mut cols: Vec<Vec<f64>> = (0..STATS_DIM)
        .map(|_| {
            (0..SPEAKER_DIM)
                .map(|_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect()
        })
        .collect();
    for j in 0..STATS_DIM {
        for i in 0..j {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = cols.split_at_mut(j);
            for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                *x -= dot * y;
            }
        }
        let n = norm(&cols[j]);
        cols[j].iter_mut().for_each(|x| *x /= n);
    }
    let mut out = vec![0.0; SPEAKER_DIM * STATS_DIM];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * STATS_DIM + j] = *v;
        }
    }
    out
}

impl SpeakerEncoder {
    pub fn new(expansion_seed: u64) -> Self {
        let window = (0..WINDOW_SAMPLES)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SAMPLES as f64).cos())
            .collect();
        Self {
            expansion: orthonormal_expansion(expansion_seed),
            filters: mel_filterbank(),
            window,
            fft: FftPlanner::new().plan_fft_forward(FFT_LEN),
        }
    }

    /// Per-frame log-mel energies, `FRAMES x MEL_BANDS`.
    pub fn log_mel(&self, samples: &[f32]) -> Result<Vec<[f64; MEL_BANDS]>> {
        if samples.len() != SEGMENT_SAMPLES {
            return Err(Error::InvalidLength {
                expected: SEGMENT_SAMPLES,
                actual: samples.len(),
            });
        }
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        let mut out = Vec::with_capacity(FRAMES);
        for k in 0..FRAMES {
            let start = k * HOP_SAMPLES;
            for (n, slot) in buf.iter_mut().enumerate() {
                let x = if n < WINDOW_SAMPLES {
                    samples.get(start + n).copied().unwrap_or(0.0) as f64 * self.window[n]
                } else {
                    0.0
                };
                *slot = Complex::new(x, 0.0);
            }
            self.fft.process(&mut buf);
            let mut bands = [0.0; MEL_BANDS];
            for (b, filter) in self.filters.iter().enumerate() {
                let e: f64 = filter.iter().map(|&(k, w)| w * buf[k].norm_sqr()).sum();
                bands[b] = e.max(LOG_FLOOR).ln();
            }
            out.push(bands);
        }
        Ok(out)
    }

    /// The 48 band statistics before expansion.
    pub fn band_statistics(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let mel = self.log_mel(samples)?;
        let n = mel.len() as f64;
        let mut means = [0.0; MEL_BANDS];
        let mut stds = [0.0; MEL_BANDS];
        for b in 0..MEL_BANDS {
            means[b] = mel.iter().map(|f| f[b]).sum::<f64>() / n;
            stds[b] = (mel.iter().map(|f| (f[b] - means[b]).powi(2)).sum::<f64>() / n).sqrt();
        }
        let centre = |v: &mut [f64; MEL_BANDS]| {
            let m = v.iter().sum::<f64>() / MEL_BANDS as f64;
            v.iter_mut().for_each(|x| *x -= m);
        };
        centre(&mut means);
        centre(&mut stds);
        Ok(means.iter().chain(stds.iter()).copied().collect())
    }

    /// Unnormalised 192-d utterance embedding.
    pub fn utterance_embedding(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let stats = self.band_statistics(samples)?;
        Ok((0..SPEAKER_DIM)
            .map(|i| {
                self.expansion[i * STATS_DIM..(i + 1) * STATS_DIM]
                    .iter()
                    .zip(&stats)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }
}

/// Mean of the utterance embeddings, L2-normalised.
///
/// The inputs are summed in a canonical order so the result is bitwise
/// independent of the order they are given in.
pub fn speaker_embedding(utterance_embeddings: &[Vec<f64>]) -> Result<SpeakerEmbedding> {
    if utterance_embeddings.is_empty() {
        return Err(Error::EmptyInput("speaker has no utterance embeddings"));
    }
    for e in utterance_embeddings {
        if e.len() != SPEAKER_DIM {
            return Err(Error::DimensionMismatch {
                what: "utterance embedding",
                expected: SPEAKER_DIM,
                actual: e.len(),
            });
        }
    }
    let mut ordered: Vec<&Vec<f64>> = utterance_embeddings.iter().collect();
    ordered.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = ordered.len() as f64;
    let mut mean = vec![0.0; SPEAKER_DIM];
    for e in ordered {
        for (m, x) in mean.iter_mut().zip(e) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let len = norm(&mean);
    if len == 0.0 || !len.is_finite() {
        return Err(Error::DegenerateSpeaker);
    }
    Ok(SpeakerEmbedding(mean.into_iter().map(|m| m / len).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_speaker_profile, synth_utterance, AttackFamily};
    use proptest::prelude::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (norm(a) * norm(b))
    }

    #[test]
    fn expansion_columns_are_orthonormal() {
        let q = orthonormal_expansion(DEFAULT_EXPANSION_SEED);
        for i in 0..STATS_DIM {
            for j in 0..STATS_DIM {
                let dot: f64 = (0..SPEAKER_DIM).map(|r| q[r * STATS_DIM + i] * q[r * STATS_DIM + j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn utterance_embedding_is_deterministic_192d() {
        let enc = SpeakerEncoder::new(DEFAULT_EXPANSION_SEED);
        let u = synth_utterance(&gen_speaker_profile(1, 0), AttackFamily::None, 3, None).unwrap();
        let a = enc.utterance_embedding(&u.samples).unwrap();
        assert_eq!(a.len(), 192);
        assert_eq!(a, enc.utterance_embedding(&u.samples).unwrap());
        assert!(enc.utterance_embedding(&u.samples[..10]).is_err());
    }

    #[test]
    fn same_speaker_is_closer_than_other_speakers() {
        let enc = SpeakerEncoder::new(DEFAULT_EXPANSION_SEED);
        let embs: Vec<Vec<Vec<f64>>> = (0..6)
            .map(|s| {
                let p = gen_speaker_profile(21, s);
                (0..4)
                    .map(|k| enc.utterance_embedding(&synth_utterance(&p, AttackFamily::None, 100 + k, None).unwrap().samples).unwrap())
                    .collect()
            })
            .collect();
        let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
        for a in 0..embs.len() {
            for b in 0..embs.len() {
                for (i, x) in embs[a].iter().enumerate() {
                    for (j, y) in embs[b].iter().enumerate() {
                        if a == b && i < j {
                            same += cosine(x, y);
                            ns += 1;
                        } else if a < b {
                            cross += cosine(x, y);
                            nc += 1;
                        }
                    }
                }
            }
        }
        let (same, cross) = (same / ns as f64, cross / nc as f64);
        assert!(same > cross, "same {same} cross {cross}");
    }

    #[test]
    fn speaker_embedding_examples() {
        let mut v = vec![0.0; SPEAKER_DIM];
        v[3] = 0.6;
        v[10] = 0.8;
        let e = speaker_embedding(&[v.clone(), v.clone()]).unwrap();
        assert!(e.as_slice().iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(speaker_embedding(&[]), Err(Error::EmptyInput(_))));
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(matches!(speaker_embedding(&[v, neg]), Err(Error::DegenerateSpeaker)));
        assert!(speaker_embedding(&[vec![1.0; 5]]).is_err());
    }

    proptest! {
        #[test]
        fn speaker_embedding_is_unit_and_order_free(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, SPEAKER_DIM), 1..8),
            rot in 0usize..8,
        ) {
            let e = speaker_embedding(&rows).unwrap();
            prop_assert!((e.norm() - 1.0).abs() <= 1e-6);
            let mut shuffled = rows.clone();
            shuffled.reverse();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            prop_assert_eq!(e, speaker_embedding(&shuffled).unwrap());
        }
    }
}
