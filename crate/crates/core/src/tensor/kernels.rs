//! GEMM entry points over `matrixmultiply`.

use crate::par;

/// Rows of `C` handed to one task. Fixed so the split never depends on the
/// thread count.
const ROW_CHUNK: usize = 32;

/// `C (m×n) = op(A) · op(B)` (or `C +=` when `accumulate`).
///
/// `a_trans` means `a` is stored as `k×m`; `b_trans` means `b` is stored as
/// `n×k`. All buffers are dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    par::for_each_chunk_mut(c, ROW_CHUNK * n, |ci, c_chunk| {
        let r0 = ci * ROW_CHUNK;
        let rows = c_chunk.len() / n;
        let (a_off, rsa, csa) = if a_trans {
            (r0, 1isize, m as isize)
        } else {
            (r0 * k, k as isize, 1isize)
        };
        // SAFETY: the offsets and strides address only elements inside `a`,
        // `b` and `c_chunk`, whose sizes were checked above.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], offset: usize, ld: usize) -> Self {
        Self {
            data,
            offset,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `C (m×n, row stride ldc, starting at c_off) = alpha·A·B + beta·C` over
/// strided views. Single-threaded; callers parallelize at a coarser level.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    ldc: usize,
) {
    a.check(m, k);
    b.check(k, n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_off + (m - 1) * ldc + n - 1 < c.len(), "gemm_view: out of bounds");
    // SAFETY: bounds of every view were asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            ldc as isize,
            1,
        );
    }
}
