//! Raw f64 kernels shared by the autodiff tape and the plain inference path.
//! Keeping one implementation per primitive guarantees both paths produce
//! bitwise-identical values for the same inputs.

/// `out += a * b` where `a` is `[m, k]`, `b` is `[k, n]`, `out` is `[m, n]`.
/// Accumulates in ascending k order for every output element.
pub(crate) fn matmul_nn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
}

pub(crate) fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_nn_acc(a, b, m, k, n, &mut out);
    out
}

/// `a * b^T` where `a` is `[m, k]`, `b` is `[n, k]`; result `[m, n]`.
/// Same ascending-k accumulation order as [`matmul_nn`].
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a_row[kk] * b_row[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a^T * g` where `a` is `[m, k]`, `g` is `[m, n]`; result `[k, n]`.
/// Accumulates in ascending m order.
pub(crate) fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] += av * g_row[j];
            }
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// ln(1 + e^x) without overflow for large |x|.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// In-place stable softmax over a contiguous lane. Delegates to the strided
/// kernel so both entry points share one arithmetic sequence.
pub(crate) fn softmax_slice(xs: &mut [f64]) {
    let len = xs.len();
    softmax_strided(xs, 0, len, 1);
}

/// Stable softmax of a lane with non-unit stride, used for axis != last.
pub(crate) fn softmax_strided(data: &mut [f64], start: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for l in 0..len {
        let x = data[start + l * stride];
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for l in 0..len {
        let idx = start + l * stride;
        data[idx] = (data[idx] - max).exp();
        sum += data[idx];
    }
    for l in 0..len {
        data[start + l * stride] /= sum;
    }
}

/// Stable log-softmax: x - max - ln(sum(exp(x - max))).
pub(crate) fn log_softmax_strided(data: &mut [f64], start: usize, len: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for l in 0..len {
        let x = data[start + l * stride];
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for l in 0..len {
        sum += (data[start + l * stride] - max).exp();
    }
    let lse = max + sum.ln();
    for l in 0..len {
        let idx = start + l * stride;
        data[idx] -= lse;
    }
}

/// Rotates `row` (length d, d even) in place by position angles: pair (2i,
/// 2i+1) turns by pos * base^(-2i/d). `dir` is +1.0 forward, -1.0 inverse
/// (used by the gradient).
pub(crate) fn rope_rotate_row(row: &mut [f64], pos: usize, base: f64, dir: f64) {
    let d = row.len();
    for i in 0..d / 2 {
        let theta = base.powf(-((2 * i) as f64) / d as f64);
        let angle = dir * pos as f64 * theta;
        let (sin, cos) = angle.sin_cos();
        let x0 = row[2 * i];
        let x1 = row[2 * i + 1];
        row[2 * i] = x0 * cos - x1 * sin;
        row[2 * i + 1] = x0 * sin + x1 * cos;
    }
}
