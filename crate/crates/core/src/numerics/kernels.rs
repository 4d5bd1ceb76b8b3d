//! Slice-level math shared by both execution contexts.
//!
//! Forward routines here return whatever cached intermediates the backward
//! pass needs; the recording context stores them, the plain evaluator drops
//! them. The three matrix products that carry training throughput delegate
//! to `matrixmultiply::dgemm` (single-threaded, fixed blocking, runtime
//! SIMD dispatch), expressed through strides so no operand is copied; the
//! remaining loops walk contiguous memory in dot-product/axpy form.

/// Dot product with four accumulators (fixed summation order, vectorizes).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < n4 {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut tail = 0.0;
    for j in n4..a.len() {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// y += a * x
#[inline]
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Mean of the selected rows of a [rows, d] matrix, accumulated in
/// ascending row order so the result is bitwise invariant to the order the
/// indices are given in (f64 addition is not associative).
pub fn row_mean(data: &[f64], d: usize, ids: &[usize]) -> Vec<f64> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut y = vec![0.0; d];
    for &r in &sorted {
        axpy(&mut y, 1.0, &data[r * d..(r + 1) * d]);
    }
    let inv = 1.0 / ids.len() as f64;
    y.iter_mut().for_each(|v| *v *= inv);
    y
}

/// y[n,m] = x[n,k] . w[m,k]^T + b[m]  (rows of both operands are contiguous)
pub fn linear(x: &[f64], n: usize, k: usize, w: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), n * k);
    assert_eq!(w.len(), m * k);
    assert_eq!(b.len(), m);
    let mut y = Vec::with_capacity(n * m);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    // w is stored [m,k] row-major; striding (rsb=1, csb=k) reads it as k x m.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0,
            x.as_ptr(), k as isize, 1,
            w.as_ptr(), 1, k as isize,
            1.0,
            y.as_mut_ptr(), m as isize, 1,
        );
    }
    y
}

/// out[n,k] += g[n,m] . w[m,k]  (input gradient of `linear`)
pub fn matmul_nn_acc(g: &[f64], n: usize, m: usize, w: &[f64], k: usize, out: &mut [f64]) {
    assert_eq!(g.len(), n * m);
    assert_eq!(w.len(), m * k);
    assert_eq!(out.len(), n * k);
    unsafe {
        matrixmultiply::dgemm(
            n, m, k, 1.0,
            g.as_ptr(), m as isize, 1,
            w.as_ptr(), k as isize, 1,
            1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// out[m,k] += g[n,m]^T . x[n,k]  (weight gradient of `linear`)
pub fn matmul_tn_acc(g: &[f64], n: usize, m: usize, x: &[f64], k: usize, out: &mut [f64]) {
    assert_eq!(g.len(), n * m);
    assert_eq!(x.len(), n * k);
    assert_eq!(out.len(), m * k);
    // g is stored [n,m] row-major; striding (rsa=1, csa=m) reads it as m x n.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            g.as_ptr(), 1, m as isize,
            x.as_ptr(), k as isize, 1,
            1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// out[m] += column sums of g[n,m]  (bias gradient of `linear`)
pub fn col_sum_acc(g: &[f64], n: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..m {
            out[j] += g[i * m + j];
        }
    }
}

/// Population mean and standard deviation of one vector.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Row-wise layer normalization with affine scale/shift.
/// Returns (y, xhat, inv_std) where xhat is the standardized input and
/// inv_std[i] = 1/sqrt(var_i + eps); both are reused by the backward pass.
pub fn layernorm(
    x: &[f64],
    n: usize,
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            y[i * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv_std)
}

/// Row-wise softmax probabilities and mean negative log-likelihood.
/// Returns (loss, probs).
pub fn softmax_cross_entropy(
    logits: &[f64],
    n: usize,
    c: usize,
    targets: &[usize],
) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..c {
            let e = (row[j] - max).exp();
            probs[i * c + j] = e;
            z += e;
        }
        for j in 0..c {
            probs[i * c + j] /= z;
        }
        loss -= probs[i * c + targets[i]].max(f64::MIN_POSITIVE).ln();
    }
    (loss / n as f64, probs)
}

/// Cached statistics for the adaptive renormalization backward pass.
#[derive(Debug, Clone)]
pub struct AdainCache {
    pub c_hat: Vec<f64>,
    pub s_hat: Vec<f64>,
    pub sigma_c: f64,
    pub sigma_s: f64,
}

/// Minimum content standard deviation accepted by `adain`.
pub const ADAIN_MIN_STD: f64 = 1e-9;

/// out = sigma(style) * (content - mean(content)) / sigma(content) + mean(style)
/// using population statistics over the feature dimension. The caller has
/// already verified sigma(content) >= ADAIN_MIN_STD.
pub fn adain(style: &[f64], content: &[f64]) -> (Vec<f64>, AdainCache) {
    let d = content.len();
    let (m_c, sigma_c) = mean_std(content);
    let (m_s, sigma_s) = mean_std(style);
    let mut c_hat = vec![0.0; d];
    let mut s_hat = vec![0.0; d];
    let mut y = vec![0.0; d];
    let s_div = if sigma_s > 0.0 { 1.0 / sigma_s } else { 0.0 };
    for j in 0..d {
        c_hat[j] = (content[j] - m_c) / sigma_c;
        s_hat[j] = (style[j] - m_s) * s_div;
        y[j] = sigma_s * c_hat[j] + m_s;
    }
    (y, AdainCache { c_hat, s_hat, sigma_c, sigma_s })
}
