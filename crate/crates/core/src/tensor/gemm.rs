use crate::Real;

/// Strided matrix product `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`.
///
/// Strides are in elements. Every index touched must lie inside the slices;
/// this is checked up front so the call into the BLAS-style kernel is sound.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Real,
    a: &[Real],
    rsa: usize,
    csa: usize,
    b: &[Real],
    rsb: usize,
    csb: usize,
    beta: Real,
    c: &mut [Real],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_index(m, k, rsa, csa) < a.len().max(1) || k == 0, "gemm: lhs out of bounds");
    assert!(max_index(k, n, rsb, csb) < b.len().max(1) || k == 0, "gemm: rhs out of bounds");
    assert!(max_index(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every element the kernel reads or writes.
    unsafe {
        #[cfg(not(feature = "f32"))]
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
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
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

fn max_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    (rows.saturating_sub(1)) * rs + (cols.saturating_sub(1)) * cs
}

/// Row-major `a (m×k) · b (k×n)` into a fresh buffer.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[Real], b: &[Real]) -> Vec<Real> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, k, 1, b, n, 1, 0.0, &mut c, n, 1);
    c
}
