//! Dense kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` with row-major operands; `a` is `m×k` (or `k×m` when
/// `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length checks above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Per-channel convolution along the middle axis of a `(ch, len, inner)`
/// tensor with zero "same" padding; `w` is `ch × k`. Overwrites `out`.
pub(crate) fn dw_conv(x: &[f64], ch: usize, len: usize, inner: usize, w: &[f64], k: usize, out: &mut [f64]) {
    let half = k / 2;
    let plane = len * inner;
    out[..ch * plane].fill(0.0);
    for c in 0..ch {
        let xs = &x[c * plane..(c + 1) * plane];
        let os = &mut out[c * plane..(c + 1) * plane];
        for (j, &wj) in w[c * k..(c + 1) * k].iter().enumerate() {
            // output row a reads input row a + j - half
            let (a_lo, a_hi) = (half.saturating_sub(j), (len + half).saturating_sub(j).min(len));
            for a in a_lo..a_hi {
                let src = (a + j - half) * inner;
                let dst = a * inner;
                for (o, s) in os[dst..dst + inner].iter_mut().zip(&xs[src..src + inner]) {
                    *o += wj * s;
                }
            }
        }
    }
}

/// Backward of [`dw_conv`]: accumulates into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dw_conv_backward(
    dy: &[f64],
    x: &[f64],
    ch: usize,
    len: usize,
    inner: usize,
    w: &[f64],
    k: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let half = k / 2;
    let plane = len * inner;
    for c in 0..ch {
        let xs = &x[c * plane..(c + 1) * plane];
        let ds = &dy[c * plane..(c + 1) * plane];
        let dxs = &mut dx[c * plane..(c + 1) * plane];
        for j in 0..k {
            let wj = w[c * k + j];
            let (a_lo, a_hi) = (half.saturating_sub(j), (len + half).saturating_sub(j).min(len));
            let mut acc = 0.0;
            for a in a_lo..a_hi {
                let src = (a + j - half) * inner;
                let dst = a * inner;
                for ((d, s), g) in ds[dst..dst + inner]
                    .iter()
                    .zip(&xs[src..src + inner])
                    .zip(&mut dxs[src..src + inner])
                {
                    acc += d * s;
                    *g += wj * d;
                }
            }
            dw[c * k + j] += acc;
        }
    }
}

/// Normalization over the whole slice with a per-position affine map.
/// Returns `1/sqrt(var + eps)`; `xhat` receives the pre-affine values.
pub(crate) fn plane_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64, xhat: &mut [f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv;
        out[i] = gamma[i] * xhat[i] + beta[i];
    }
    inv
}

/// Backward of [`plane_norm`]; `dx` is overwritten when given.
pub(crate) fn plane_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: f64,
    gamma: &[f64],
    dx: Option<&mut [f64]>,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = dy.len() as f64;
    let (mut s1, mut s2) = (0.0, 0.0);
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
        let g = dy[i] * gamma[i];
        s1 += g;
        s2 += g * xhat[i];
    }
    if let Some(dx) = dx {
        let (m1, m2) = (s1 / n, s2 / n);
        for i in 0..dy.len() {
            dx[i] = inv * (dy[i] * gamma[i] - m1 - xhat[i] * m2);
        }
    }
}

/// `out = Σ_c w[c] · u[c·len..(c+1)·len]`.
pub(crate) fn mix_row(w: &[f64], u: &[f64], len: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (c, &wc) in w.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(&u[c * len..(c + 1) * len]) {
            *o += wc * x;
        }
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let c = a.chunks_exact(8);
    let tail: f64 = c.remainder().iter().sum();
    for x in c {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
