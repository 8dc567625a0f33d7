use super::Element;

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

#[allow(clippy::too_many_arguments)]
pub(super) fn check_extents(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    a_strides: (isize, isize),
    b_len: usize,
    b_strides: (isize, isize),
    c_len: usize,
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_offset(m, n, c_strides) < c_len, "gemm: C out of bounds");
    if k == 0 {
        return;
    }
    assert!(max_offset(m, k, a_strides) < a_len, "gemm: A out of bounds");
    assert!(max_offset(k, n, b_strides) < b_len, "gemm: B out of bounds");
}

/// Row-major `C (m×n) = alpha·op(A)·op(B) + beta·C`, where `ta`/`tb` select
/// the transpose of the stored row-major operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    // stored A is m×k (or k×m when transposed), row-major
    let a_strides = if ta { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}
