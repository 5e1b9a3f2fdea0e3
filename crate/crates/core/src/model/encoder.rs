//! Strided 1-d convolution stack followed by layer norm and a linear map to
//! the transformer width.
//!
//! The waveform is standardised per utterance; each conv layer is followed
//! by a layer norm over channels and a GELU.
//!
//! Activations are channels-last (`length x channels`, row-major). Output
//! frame `i` of a layer reads input rows `[i*stride, i*stride + kernel)`;
//! the input is zero-padded at the tail so exactly `len / stride` frames
//! come out. A window of consecutive rows is contiguous in memory, so the
//! convolution is a single strided GEMM without an im2col copy.

use super::ops::{self, gelu, gelu_grad, NormCache};
use super::{accumulate, ModelParams};
use crate::{Error, Result};

pub(crate) struct EncoderCache {
    /// Zero-padded input of each conv layer.
    padded: Vec<Vec<f64>>,
    /// Normalised (pre-GELU) output of each conv layer.
    pre: Vec<Vec<f64>>,
    conv_norms: Vec<NormCache>,
    out_lens: Vec<usize>,
    norm: NormCache,
    normed: Vec<f64>,
}

impl ModelParams {
    pub(crate) fn encode_forward(&self, samples: &[f32]) -> Result<(Vec<f64>, EncoderCache)> {
        let cfg = self.config();
        if samples.len() != cfg.input_samples() {
            return Err(Error::InvalidLength { expected: cfg.input_samples(), actual: samples.len() });
        }
        let ids = self.ids();
        let mut x = standardize(samples);
        let mut len = samples.len();
        let mut padded_all = Vec::with_capacity(ids.conv.len());
        let mut pre_all = Vec::with_capacity(ids.conv.len());
        let mut out_lens = Vec::with_capacity(ids.conv.len());
        let mut conv_norms = Vec::with_capacity(ids.conv.len());
        for c in &ids.conv {
            let out_len = len / c.stride;
            let pad_rows = c.kernel - c.stride;
            x.resize((len + pad_rows) * c.in_ch, 0.0);
            let mut pre = Vec::with_capacity(out_len * c.out_ch);
            let bias = self.t(c.b);
            for _ in 0..out_len {
                pre.extend_from_slice(bias);
            }
            let window = c.kernel * c.in_ch;
            ops::gemm(
                out_len,
                window,
                c.out_ch,
                1.0,
                &x,
                c.stride * c.in_ch,
                1,
                self.t(c.w),
                c.out_ch,
                1,
                1.0,
                &mut pre,
                c.out_ch,
                1,
            );
            let (pre, nc) = ops::layer_norm(&pre, out_len, c.out_ch, self.t(c.norm.gamma), self.t(c.norm.beta));
            conv_norms.push(nc);
            let post: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
            padded_all.push(std::mem::replace(&mut x, post));
            pre_all.push(pre);
            out_lens.push(out_len);
            len = out_len;
        }
        let channels = ids.conv.last().map(|c| c.out_ch).unwrap_or(1);
        let fnorm = ids.feat_norm;
        let (normed, norm) = ops::layer_norm(&x, len, channels, self.t(fnorm.gamma), self.t(fnorm.beta));
        let fp = ids.feat_proj;
        let z = ops::linear(&normed, len, self.t(fp.w), self.t(fp.b), fp.fan_in, fp.fan_out);
        Ok((z, EncoderCache { padded: padded_all, pre: pre_all, conv_norms, out_lens, norm, normed }))
    }

    pub(crate) fn encode_backward(&self, cache: &EncoderCache, dz: &[f64], grads: &mut [f64]) {
        let ids = self.ids();
        let layout = self.layout();
        let frames = *cache.out_lens.last().unwrap_or(&0);
        let fp = ids.feat_proj;
        let dnormed = {
            let (dw, db) = split_pair(grads, layout.range(fp.w), layout.range(fp.b));
            ops::linear_backward(&cache.normed, dz, frames, self.t(fp.w), fp.fan_in, fp.fan_out, dw, db, true)
                .expect("dx requested")
        };
        let fnorm = ids.feat_norm;
        let mut dpost = {
            let (dg, dbeta) = split_pair(grads, layout.range(fnorm.gamma), layout.range(fnorm.beta));
            ops::layer_norm_backward(&dnormed, &cache.norm, frames, fnorm.dim, self.t(fnorm.gamma), dg, dbeta)
        };
        for (l, c) in ids.conv.iter().enumerate().rev() {
            let out_len = cache.out_lens[l];
            let dnorm: Vec<f64> = dpost.iter().zip(&cache.pre[l]).map(|(g, &p)| g * gelu_grad(p)).collect();
            let dpre = {
                let (dg, dbeta) = split_pair(grads, layout.range(c.norm.gamma), layout.range(c.norm.beta));
                ops::layer_norm_backward(&dnorm, &cache.conv_norms[l], out_len, c.out_ch, self.t(c.norm.gamma), dg, dbeta)
            };
            let window = c.kernel * c.in_ch;
            let padded = &cache.padded[l];
            {
                let dw = &mut grads[layout.range(c.w)];
                // dW (window x out) += X_win^T dpre
                ops::gemm(window, out_len, c.out_ch, 1.0, padded, 1, c.stride * c.in_ch, &dpre, c.out_ch, 1, 1.0, dw, c.out_ch, 1);
            }
            {
                let db = &mut grads[layout.range(c.b)];
                for row in dpre.chunks(c.out_ch) {
                    accumulate(db, row);
                }
            }
            if l == 0 {
                break;
            }
            // dX_win = dpre W^T, scattered back onto overlapping windows
            let mut dwin = vec![0.0; out_len * window];
            ops::gemm(out_len, c.out_ch, window, 1.0, &dpre, c.out_ch, 1, self.t(c.w), 1, c.out_ch, 0.0, &mut dwin, window, 1);
            let in_len = cache.out_lens[l - 1];
            let mut dx = vec![0.0; padded.len()];
            for i in 0..out_len {
                let start = i * c.stride * c.in_ch;
                accumulate(&mut dx[start..start + window], &dwin[i * window..(i + 1) * window]);
            }
            dx.truncate(in_len * c.in_ch);
            dpost = dx;
        }
    }
}

/// Zero mean, unit variance; silence stays silence.
fn standardize(samples: &[f32]) -> Vec<f64> {
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / n;
    let var = samples.iter().map(|&s| (s as f64 - mean).powi(2)).sum::<f64>() / n;
    let scale = 1.0 / (var + 1e-7).sqrt();
    samples.iter().map(|&s| (s as f64 - mean) * scale).collect()
}

/// Two disjoint mutable sub-slices of `buf`.
pub(crate) fn split_pair(
    buf: &mut [f64],
    a: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start || b.end <= a.start, "overlapping ranges");
    if a.start < b.start {
        let (lo, hi) = buf.split_at_mut(b.start);
        (&mut lo[a], &mut hi[..b.end - b.start])
    } else {
        let (lo, hi) = buf.split_at_mut(a.start);
        (&mut hi[..a.end - a.start], &mut lo[b])
    }
}
