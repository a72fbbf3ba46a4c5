/// Strided matrix view used by [`gemm`]: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatRef {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        MatRef {
            offset,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Row-major `rows × cols` storage viewed as its `cols × rows` transpose.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        MatRef {
            offset,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c ← a·b + beta·c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatRef,
    b: &[f64],
    bv: MatRef,
    beta: f64,
    c: &mut [f64],
    cv: MatRef,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(
        av.last_index(m, k) < a.len(),
        "gemm: lhs view out of bounds"
    );
    assert!(
        bv.last_index(k, n) < b.len(),
        "gemm: rhs view out of bounds"
    );
    assert!(
        cv.last_index(m, n) < c.len(),
        "gemm: output view out of bounds"
    );
    // SAFETY: every element addressed through the three views was bounds
    // checked above, and `c` is uniquely borrowed so it cannot alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}
