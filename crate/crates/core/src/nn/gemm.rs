use super::Scalar;

/// Layout of a matrix operand inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub row: usize,
    pub col: usize,
}

impl Strides {
    /// Row-major with `cols` columns.
    pub const fn rm(cols: usize) -> Self {
        Self { row: cols, col: 1 }
    }
    /// Transpose of a row-major matrix with `cols` columns.
    pub const fn tr(cols: usize) -> Self {
        Self { row: 1, col: cols }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row + (cols - 1) * self.col + 1
        }
    }
}

/// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    sa: Strides,
    b: &[F],
    sb: Strides,
    beta: F,
    c: &mut [F],
    sc: Strides,
) {
    assert!(a.len() >= sa.span(m, k), "gemm: A too small");
    assert!(b.len() >= sb.span(k, n), "gemm: B too small");
    assert!(c.len() >= sc.span(m, n), "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: spans checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.row as isize,
            sa.col as isize,
            b.as_ptr(),
            sb.row as isize,
            sb.col as isize,
            beta,
            c.as_mut_ptr(),
            sc.row as isize,
            sc.col as isize,
        );
    }
}
