//! Row-major dense helpers over `matrixmultiply::dgemm`.

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices covering the strided extents; checked by
    // the public wrappers below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `c (m×n) (+)= a (m×k) · b (k×n)`
pub fn mm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if acc { 1.0 } else { 0.0 };
    gemm_strided(
        m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// `c (m×n) (+)= a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn mm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let beta = if acc { 1.0 } else { 0.0 };
    gemm_strided(
        m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1,
    );
}

/// `c (m×n) (+)= aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn mm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    let beta = if acc { 1.0 } else { 0.0 };
    gemm_strided(
        m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1,
    );
}

/// General strided product used for per-head attention slices.
#[allow(clippy::too_many_arguments)]
pub fn mm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    gemm_strided(
        m, k, n, alpha, a.0, a.1, a.2, b.0, b.1, b.2, beta, c.0, c.1, c.2,
    );
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// In-place numerically stable softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
