//! Dense matrix product backing `matmul` and its backward rule.

/// A strided read-only view of a matrix buffer.
#[derive(Clone, Copy)]
pub(super) struct View<'a> {
    data: &'a [f64],
    row_stride: isize,
    col_stride: isize,
}

impl<'a> View<'a> {
    /// Row-major matrix with `cols` columns.
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix that has `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out (m×n, row-major) = a (m×k) · b (k×n) + beta · out`.
pub(super) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, out: &mut [f64], beta: f64) {
    assert_eq!(out.len(), m * n);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|o| *o *= beta);
        return;
    }
    // SAFETY: the asserts above bound every strided access made by dgemm:
    // `a` spans m×k elements, `b` spans k×n and `out` is exactly m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
