/// Strided matrix layout: `(row_stride, col_stride)`.
pub(crate) type Strides = (isize, isize);

pub(crate) const ROW_MAJOR: fn(usize) -> Strides = |cols| (cols as isize, 1);

/// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product with arbitrary
/// strides on every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    beta: f32,
    c: &mut [f32],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(span(m, k, sa) <= a.len(), "gemm: lhs out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm: rhs out of bounds");
    assert!(span(m, n, sc) <= c.len(), "gemm: output out of bounds");
    // SAFETY: the three asserts above guarantee that every element addressed
    // through the given strides lies inside its slice; `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
}

/// Row-major `out = a·b` for `a: m×k`, `b: k×n`.
pub fn matmul_into(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    gemm(m, k, n, 1.0, a, ROW_MAJOR(k), b, ROW_MAJOR(n), 0.0, out, ROW_MAJOR(n));
}
