//! Dense kernels with explicit backward passes. All matrices are row-major
//! `f64`; strided views are expressed through (row stride, column stride).

/// `C = alpha * A B + beta * C` for an `m x k` view `A` and a `k x n` view
/// `B`, with arbitrary strides. Panics if a view exceeds its slice.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A view out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B view out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `y = x W + b` for `x: rows x fan_in`, `W: fan_in x fan_out`.
pub(crate) fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * fan_out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(rows, fan_in, fan_out, 1.0, x, fan_in, 1, w, fan_out, 1, 1.0, &mut y, fan_out, 1);
    y
}

/// Accumulates `dW += x^T dy`, `db += sum_rows dy` and returns `dx = dy W^T`
/// when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    w: &[f64],
    fan_in: usize,
    fan_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    gemm(fan_in, rows, fan_out, 1.0, x, 1, fan_in, dy, fan_out, 1, 1.0, dw, fan_out, 1);
    for r in 0..rows {
        for (acc, g) in db.iter_mut().zip(&dy[r * fan_out..(r + 1) * fan_out]) {
            *acc += g;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * fan_in];
        gemm(rows, fan_out, fan_in, 1.0, dy, fan_out, 1, w, 1, fan_out, 0.0, &mut dx, fan_in, 1);
        dx
    })
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Layer normalisation over the last dimension.
pub(crate) fn layer_norm(x: &[f64], rows: usize, dim: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; rows * dim];
    let mut xhat = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let h = (row[i] - mean) * rs;
            xhat[r * dim + i] = h;
            y[r * dim + i] = gamma[i] * h + beta[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    rows: usize,
    dim: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; rows * dim];
    let n = dim as f64;
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let off = r * dim;
        let mut sum = 0.0;
        let mut sum_xh = 0.0;
        for i in 0..dim {
            let g = dy[off + i];
            let xh = cache.xhat[off + i];
            dgamma[i] += g * xh;
            dbeta[i] += g;
            dxhat[i] = g * gamma[i];
            sum += dxhat[i];
            sum_xh += dxhat[i] * xh;
        }
        let rs = cache.rstd[r];
        for i in 0..dim {
            dx[off + i] = rs / n * (n * dxhat[i] - sum - cache.xhat[off + i] * sum_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, k, 1, &b, n, 1, 0.0, &mut c, n, 1);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
        // (A^T)^T B using a transposed copy of A
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &at, 1, m, &b, n, 1, 0.0, &mut c2, n, 1);
        assert_eq!(c, c2);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.13;
            let h = 1e-5;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x: Vec<f64> = (0..12).map(|i| (i * i) as f64).collect();
        let (y, _) = layer_norm(&x, 3, 4, &[1.0; 4], &[0.0; 4]);
        for row in y.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
    }
}
