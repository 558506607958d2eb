//! GEMM entry points over row-major slices, backed by `matrixmultiply`.
//! Single-threaded; for a given shape and CPU the reduction order is fixed,
//! so repeated runs are bitwise identical.

/// `c += A·B` with explicit strides (`rs` row, `cs` column) for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (ars, acs): (usize, usize),
    b: &[f64],
    (brs, bcs): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the callers' slice lengths cover every element addressed by
    // these strides (checked below in debug builds), and `c` is a distinct
    // exclusive borrow.
    debug_assert!((m - 1) * ars + (k - 1) * acs < a.len());
    debug_assert!((k - 1) * brs + (n - 1) * bcs < b.len());
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(
        a.len() == m * k && b.len() == k * n && c.len() == m * n,
        "gemm_nn operand sizes"
    );
    gemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m,n] += aᵀ · b` where `a` is stored as `[k,m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(
        a.len() == k * m && b.len() == k * n && c.len() == m * n,
        "gemm_tn operand sizes"
    );
    gemm(m, k, n, a, (1, m), b, (n, 1), c);
}

/// `c[m,n] += a · bᵀ` where `b` is stored as `[n,k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(
        a.len() == m * k && b.len() == n * k && c.len() == m * n,
        "gemm_nt operand sizes"
    );
    gemm(m, k, n, a, (k, 1), b, (1, k), c);
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_naive() {
        for (m, k, n) in [(3, 5, 4), (9, 7, 17), (4, 3, 8), (1, 1, 1)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let want = naive(m, k, n, &a, &b);

            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
