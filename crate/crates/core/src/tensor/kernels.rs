//! Dense row-major kernels shared by the tape ops.

// The matmul kernels are element-wise axpy loops with no reassociation, so
// the AVX2 builds produce bit-identical results to the baseline builds.
macro_rules! dispatch {
    ($avx:ident, $base:ident ( $($arg:expr),* )) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the CPU supports the features enabled on `$avx`.
                return unsafe { $avx($($arg),*) };
            }
        }
        $base($($arg),*)
    }};
}

#[inline(always)]
fn matmul_impl(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            axpy(aik, &b[kk * n..(kk + 1) * n], row);
        }
    }
}

#[inline(always)]
fn matmul_grad_lhs_impl(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    let mut bt = vec![0.0; n * k];
    for kk in 0..k {
        for j in 0..n {
            bt[j * k + kk] = b[kk * n + j];
        }
    }
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (j, &g) in dc_row.iter().enumerate() {
            if g != 0.0 {
                axpy(g, &bt[j * k..(j + 1) * k], da_row);
            }
        }
    }
}

#[inline(always)]
fn matmul_grad_rhs_impl(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            axpy(aik, dc_row, &mut db[kk * n..(kk + 1) * n]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    matmul_impl(a, b, m, k, n, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_grad_lhs_avx2(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    matmul_grad_lhs_impl(dc, b, m, k, n, da)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_grad_rhs_avx2(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    matmul_grad_rhs_impl(a, dc, m, k, n, db)
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    dispatch!(matmul_avx2, matmul_impl(a, b, m, k, n, out))
}

/// `da[m×k] += dc[m×n] · bᵀ`.
pub fn matmul_grad_lhs(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    dispatch!(matmul_grad_lhs_avx2, matmul_grad_lhs_impl(dc, b, m, k, n, da))
}

/// `db[k×n] += aᵀ · dc[m×n]`.
pub fn matmul_grad_rhs(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    dispatch!(matmul_grad_rhs_avx2, matmul_grad_rhs_impl(a, dc, m, k, n, db))
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline(always)]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable `log Σ exp(x)`; returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))` with max subtraction.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Row-wise log-softmax of a `[rows × cols]` buffer.
pub fn log_softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let lse = log_sum_exp(xr);
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
}

/// Row-wise softmax of a `[rows × cols]` buffer.
pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let m = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in or.iter_mut() {
            *o /= s;
        }
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        matmul(&a, &b, 2, 3, 2, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn log_add_matches_direct() {
        let (a, b) = (-3.2f64, 1.7f64);
        assert!((log_add(a, b) - (a.exp() + b.exp()).ln()).abs() < 1e-14);
        assert_eq!(log_add(f64::NEG_INFINITY, 2.0), 2.0);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        let w = log_sum_exp(&[1000.0, 1000.0]);
        assert!((w - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn gelu_fixed_point_and_slope() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_grad(0.0) - 0.5).abs() < 1e-15);
        assert!((gelu(3.0) - 3.0 * 0.998_650_101_968_369_9).abs() < 1e-12);
    }
}
