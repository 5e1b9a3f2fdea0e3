//! Pre-norm transformer layers with sinusoidal absolute positions.

use super::encoder::split_pair;
use super::ops::{self, gelu, gelu_grad, NormCache};
use super::{accumulate, dropout_mask, BlockIds, LinearIds, Mode, ModelParams};

struct BlockCache {
    ln1: NormCache,
    u: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention probabilities, `heads x T x T`.
    probs: Vec<f64>,
    o: Vec<f64>,
    ln2: NormCache,
    v2: Vec<f64>,
    a1: Vec<f64>,
    /// FFN activation after dropout.
    g: Vec<f64>,
    drop: Option<Vec<f64>>,
}

pub(crate) struct ContextCache {
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
}

/// `pe[t][2i] = sin(t / 10000^(2i/d))`, `pe[t][2i+1] = cos(...)`.
pub(crate) fn positional_encoding(frames: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            pe[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl ModelParams {
    fn lin(&self, x: &[f64], rows: usize, l: LinearIds) -> Vec<f64> {
        ops::linear(x, rows, self.t(l.w), self.t(l.b), l.fan_in, l.fan_out)
    }

    fn lin_back(&self, x: &[f64], dy: &[f64], rows: usize, l: LinearIds, grads: &mut [f64]) -> Vec<f64> {
        let layout = self.layout();
        let (dw, db) = split_pair(grads, layout.range(l.w), layout.range(l.b));
        ops::linear_backward(x, dy, rows, self.t(l.w), l.fan_in, l.fan_out, dw, db, true).expect("dx requested")
    }

    pub(crate) fn context_forward(&self, x_in: &[f64], mode: Mode) -> (Vec<f64>, ContextCache) {
        let cfg = self.config();
        let (t, h) = (cfg.frames, cfg.hidden_dim);
        let mut x = x_in.to_vec();
        accumulate(&mut x, &positional_encoding(t, h));
        let ids = self.ids();
        let mut blocks = Vec::with_capacity(ids.blocks.len());
        for (l, b) in ids.blocks.iter().enumerate() {
            let (x_next, cache) = self.block_forward(&x, b, mode, l as u64);
            blocks.push(cache);
            x = x_next;
        }
        let f = ids.final_norm;
        let (out, final_norm) = ops::layer_norm(&x, t, h, self.t(f.gamma), self.t(f.beta));
        (out, ContextCache { blocks, final_norm })
    }

    fn block_forward(&self, x: &[f64], b: &BlockIds, mode: Mode, site: u64) -> (Vec<f64>, BlockCache) {
        let cfg = self.config();
        let (t, h, nh, dh) = (cfg.frames, cfg.hidden_dim, cfg.n_heads, cfg.head_dim());
        let (u, ln1) = ops::layer_norm(x, t, h, self.t(b.ln1.gamma), self.t(b.ln1.beta));
        let q = self.lin(&u, t, b.q);
        let k = self.lin(&u, t, b.k);
        let v = self.lin(&u, t, b.v);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; nh * t * t];
        let mut o = vec![0.0; t * h];
        for hd in 0..nh {
            let off = hd * dh;
            let a = &mut probs[hd * t * t..(hd + 1) * t * t];
            ops::gemm(t, dh, t, scale, &q[off..], h, 1, &k[off..], 1, h, 0.0, a, t, 1);
            ops::softmax_rows(a, t);
            ops::gemm(t, t, dh, 1.0, a, t, 1, &v[off..], h, 1, 0.0, &mut o[off..], h, 1);
        }
        let attn = self.lin(&o, t, b.o);
        let mut x1 = x.to_vec();
        accumulate(&mut x1, &attn);
        let (v2, ln2) = ops::layer_norm(&x1, t, h, self.t(b.ln2.gamma), self.t(b.ln2.beta));
        let a1 = self.lin(&v2, t, b.ff1);
        let mut g: Vec<f64> = a1.iter().map(|&a| gelu(a)).collect();
        let drop = dropout_mask(mode, cfg.dropout_rate, site, g.len());
        if let Some(m) = &drop {
            g.iter_mut().zip(m).for_each(|(gv, mv)| *gv *= mv);
        }
        let f = self.lin(&g, t, b.ff2);
        accumulate(&mut x1, &f);
        (x1, BlockCache { ln1, u, q, k, v, probs, o, ln2, v2, a1, g, drop })
    }

    /// Returns the gradient with respect to the transformer input.
    pub(crate) fn context_backward(&self, cache: &ContextCache, dout: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let cfg = self.config();
        let (t, h) = (cfg.frames, cfg.hidden_dim);
        let ids = self.ids();
        let f = ids.final_norm;
        let mut dx = {
            let (dg, db) = split_pair(grads, self.layout().range(f.gamma), self.layout().range(f.beta));
            ops::layer_norm_backward(dout, &cache.final_norm, t, h, self.t(f.gamma), dg, db)
        };
        for (b, c) in ids.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(c, b, dx, grads);
        }
        dx
    }

    fn block_backward(&self, c: &BlockCache, b: &BlockIds, dx2: Vec<f64>, grads: &mut [f64]) -> Vec<f64> {
        let cfg = self.config();
        let (t, h, nh, dh) = (cfg.frames, cfg.hidden_dim, cfg.n_heads, cfg.head_dim());
        let layout = self.layout();
        // FFN branch
        let mut dg = self.lin_back(&c.g, &dx2, t, b.ff2, grads);
        if let Some(m) = &c.drop {
            dg.iter_mut().zip(m).for_each(|(d, mv)| *d *= mv);
        }
        let da1: Vec<f64> = dg.iter().zip(&c.a1).map(|(d, &a)| d * gelu_grad(a)).collect();
        let dv2 = self.lin_back(&c.v2, &da1, t, b.ff1, grads);
        let mut dx1 = {
            let (dgm, dbt) = split_pair(grads, layout.range(b.ln2.gamma), layout.range(b.ln2.beta));
            ops::layer_norm_backward(&dv2, &c.ln2, t, h, self.t(b.ln2.gamma), dgm, dbt)
        };
        accumulate(&mut dx1, &dx2);
        // attention branch
        let d_o = self.lin_back(&c.o, &dx1, t, b.o, grads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; t * h];
        let mut dk = vec![0.0; t * h];
        let mut dv = vec![0.0; t * h];
        let mut ds = vec![0.0; t * t];
        for hd in 0..nh {
            let off = hd * dh;
            let a = &c.probs[hd * t * t..(hd + 1) * t * t];
            // dA = dO_h V_h^T
            ops::gemm(t, dh, t, 1.0, &d_o[off..], h, 1, &c.v[off..], 1, h, 0.0, &mut ds, t, 1);
            // dV_h = A^T dO_h
            ops::gemm(t, t, dh, 1.0, a, 1, t, &d_o[off..], h, 1, 0.0, &mut dv[off..], h, 1);
            for r in 0..t {
                let arow = &a[r * t..(r + 1) * t];
                let drow = &mut ds[r * t..(r + 1) * t];
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(p, d)| p * d).sum();
                for (d, p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot) * scale;
                }
            }
            ops::gemm(t, t, dh, 1.0, &ds, t, 1, &c.k[off..], h, 1, 0.0, &mut dq[off..], h, 1);
            ops::gemm(t, t, dh, 1.0, &ds, 1, t, &c.q[off..], h, 1, 0.0, &mut dk[off..], h, 1);
        }
        let mut du = self.lin_back(&c.u, &dq, t, b.q, grads);
        accumulate(&mut du, &self.lin_back(&c.u, &dk, t, b.k, grads));
        accumulate(&mut du, &self.lin_back(&c.u, &dv, t, b.v, grads));
        let mut dx = {
            let (dgm, dbt) = split_pair(grads, layout.range(b.ln1.gamma), layout.range(b.ln1.beta));
            ops::layer_norm_backward(&du, &c.ln1, t, h, self.t(b.ln1.gamma), dgm, dbt)
        };
        accumulate(&mut dx, &dx1);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(3, 4);
        assert_eq!(&pe[0..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[6] - (1.0 / 100.0f64).sin()).abs() < 1e-15);
    }
}
