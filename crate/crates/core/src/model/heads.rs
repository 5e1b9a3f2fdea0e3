//! Projection head (frame-wise affine into target space) and classifier head.

use super::encoder::split_pair;
use super::ops;
use super::{dropout_mask, Mode, ModelParams, DROPOUT_SITE_HEAD};

pub(crate) struct ClassifierCache {
    rows: usize,
    pooled: Vec<f64>,
    pre: Vec<f64>,
    drop: Option<Vec<f64>>,
    hidden: Vec<f64>,
}

impl ModelParams {
    /// Projects the selected rows of `h` (`T x H`), returning the gathered
    /// rows and their projections.
    pub(crate) fn project_rows(&self, h: &[f64], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let hd = self.config().hidden_dim;
        let mut gathered = Vec::with_capacity(rows.len() * hd);
        for &r in rows {
            gathered.extend_from_slice(&h[r * hd..(r + 1) * hd]);
        }
        let p = self.ids().projection;
        let out = ops::linear(&gathered, rows.len(), self.t(p.w), self.t(p.b), p.fan_in, p.fan_out);
        (gathered, out)
    }

    /// Backward of [`Self::project_rows`]; scatters into `dh` (`T x H`).
    pub(crate) fn project_rows_backward(
        &self,
        gathered: &[f64],
        rows: &[usize],
        dout: &[f64],
        grads: &mut [f64],
        dh: &mut [f64],
    ) {
        let p = self.ids().projection;
        let hd = self.config().hidden_dim;
        let layout = self.layout();
        let (dw, db) = split_pair(grads, layout.range(p.w), layout.range(p.b));
        let dg = ops::linear_backward(gathered, dout, rows.len(), self.t(p.w), p.fan_in, p.fan_out, dw, db, true)
            .expect("dx requested");
        for (i, &r) in rows.iter().enumerate() {
            super::accumulate(&mut dh[r * hd..(r + 1) * hd], &dg[i * hd..(i + 1) * hd]);
        }
    }

    pub(crate) fn classify_forward(&self, h: &[f64], rows: usize, mode: Mode) -> (Vec<f64>, ClassifierCache) {
        let hd = self.config().hidden_dim;
        let mut pooled = vec![0.0; hd];
        for r in 0..rows {
            super::accumulate(&mut pooled, &h[r * hd..(r + 1) * hd]);
        }
        pooled.iter_mut().for_each(|v| *v /= rows as f64);
        let ids = self.ids();
        let (c1, c2) = (ids.cls_hidden, ids.cls_out);
        let pre = ops::linear(&pooled, 1, self.t(c1.w), self.t(c1.b), c1.fan_in, c1.fan_out);
        let drop = dropout_mask(mode, self.config().dropout_rate, DROPOUT_SITE_HEAD, pre.len());
        let hidden: Vec<f64> = pre
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let v = drop.as_ref().map_or(v, |m| v * m[i]);
                v.max(0.0)
            })
            .collect();
        let logits = ops::linear(&hidden, 1, self.t(c2.w), self.t(c2.b), c2.fan_in, c2.fan_out);
        (logits, ClassifierCache { rows, pooled, pre, drop, hidden })
    }

    /// Returns `dh` (`T x H`), every row equal to `dpooled / T`.
    pub(crate) fn classify_backward(&self, c: &ClassifierCache, dlogits: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let ids = self.ids();
        let layout = self.layout();
        let (c1, c2) = (ids.cls_hidden, ids.cls_out);
        let dhidden = {
            let (dw, db) = split_pair(grads, layout.range(c2.w), layout.range(c2.b));
            ops::linear_backward(&c.hidden, dlogits, 1, self.t(c2.w), c2.fan_in, c2.fan_out, dw, db, true)
                .expect("dx requested")
        };
        let dpre: Vec<f64> = dhidden
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let scale = c.drop.as_ref().map_or(1.0, |m| m[i]);
                if c.pre[i] * scale > 0.0 {
                    d * scale
                } else {
                    0.0
                }
            })
            .collect();
        let dpooled = {
            let (dw, db) = split_pair(grads, layout.range(c1.w), layout.range(c1.b));
            ops::linear_backward(&c.pooled, &dpre, 1, self.t(c1.w), c1.fan_in, c1.fan_out, dw, db, true)
                .expect("dx requested")
        };
        let inv = 1.0 / c.rows as f64;
        let row: Vec<f64> = dpooled.iter().map(|d| d * inv).collect();
        row.repeat(c.rows)
    }
}
