//! Raw slice kernels shared by the graph ops.

/// Strided matrix view: `(row_stride, col_stride)`.
pub(crate) type Strides = (isize, isize);

pub(crate) const ROW_MAJOR: fn(usize) -> Strides = |cols| (cols as isize, 1);
pub(crate) const TRANSPOSED: fn(usize) -> Strides = |cols| (1, cols as isize);

fn max_offset(rows: usize, cols: usize, s: Strides) -> isize {
    if rows == 0 || cols == 0 {
        return -1;
    }
    (rows as isize - 1) * s.0 + (cols as isize - 1) * s.1
}

/// `c = alpha * a[m,k] * b[k,n] + beta * c` over strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(max_offset(m, k, sa) < a.len() as isize, "gemm: lhs view out of bounds");
    assert!(max_offset(k, n, sb) < b.len() as isize, "gemm: rhs view out of bounds");
    assert!(max_offset(m, n, sc) < c.len() as isize, "gemm: out view out of bounds");
    // SAFETY: every index touched by dgemm is bounded by the asserts above and
    // the three slices cannot alias (one is &mut).
    unsafe {
        matrixmultiply::dgemm(
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

/// In-place softmax over one row. A row of all `-inf` becomes all zeros.
pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Backward of a softmax row given its output `p` and upstream `dp`.
pub(crate) fn softmax_row_backward(p: &[f64], dp: &[f64], dx: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((d, &pi), &dpi) in dx.iter_mut().zip(p).zip(dp) {
        *d += pi * (dpi - dot);
    }
}

/// Numerically stable `ln(sum(exp(row)))`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]; a^T b = [[26,30],[38,44]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, TRANSPOSED(2), &b, ROW_MAJOR(2), 0.0, &mut c, ROW_MAJOR(2));
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn masked_row_is_zero() {
        let mut r = [f64::NEG_INFINITY; 3];
        softmax_row(&mut r);
        assert_eq!(r, [0.0; 3]);
        let mut r = [f64::NEG_INFINITY, 0.0];
        softmax_row(&mut r);
        assert_eq!(r, [0.0, 1.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
