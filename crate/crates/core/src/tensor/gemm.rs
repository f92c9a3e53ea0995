//! Strided GEMM wrapper over `matrixmultiply`.

use super::Float;

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Row-major storage of an `r x c` matrix read as its `c x r` transpose.
    pub fn transposed(stored_cols: usize) -> Self {
        Self { rs: 1, cs: stored_cols }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a·b + beta·c` for `a: m x k`, `b: k x n`, `c: m x n` (row-major `c`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= la.extent(m, k), "gemm: lhs buffer too small");
    assert!(b.len() >= lb.extent(k, n), "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside the
    // three slices, and `c` does not alias `a` or `b` because it is `&mut`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            [la.rs as isize, la.cs as isize],
            b.as_ptr(),
            [lb.rs as isize, lb.cs as isize],
            beta,
            c.as_mut_ptr(),
            n as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_layouts() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        gemm(2, 2, 2, &a, Layout::row_major(2), &b, Layout::row_major(2), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a^T · b
        gemm(2, 2, 2, &a, Layout::transposed(2), &b, Layout::row_major(2), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        // a · b^T, accumulated onto the previous result
        gemm(2, 2, 2, &a, Layout::row_major(2), &b, Layout::transposed(2), 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
