//! Row-major GEMM wrappers over `matrixmultiply`.

fn check(len: usize, rows: usize, cols: usize, what: &str) {
    assert!(
        len >= rows * cols,
        "{what}: buffer of {len} too small for {rows} x {cols}"
    );
}

/// `c = a · wᵀ (+ c if accumulate)` with `a: m x k`, `w: n x k`, `c: m x n`.
pub fn matmul_nt(a: &[f64], w: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    check(a.len(), m, k, "a");
    check(w.len(), n, k, "w");
    check(c.len(), m, n, "c");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = gᵀ · h` with `g: m x n`, `h: m x k`, `c: n x k`.
pub fn matmul_tn(g: &[f64], h: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    check(g.len(), m, n, "g");
    check(h.len(), m, k, "h");
    check(c.len(), n, k, "c");
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.as_ptr(),
            1,
            n as isize,
            h.as_ptr(),
            k as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `c = g · w` with `g: m x n`, `w: n x k`, `c: m x k`.
pub fn matmul_nn(g: &[f64], w: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    check(g.len(), m, n, "g");
    check(w.len(), n, k, "w");
    check(c.len(), m, k, "c");
    // SAFETY: as above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.as_ptr(),
            n as isize,
            1,
            w.as_ptr(),
            k as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    fn close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn products_match_naive() {
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expect = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &transpose(&b, k, n), &mut c, m, k, n, false);
        close(&c, &expect);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        close(&c, &expect);

        let mut c = vec![0.0; m * n];
        matmul_tn(&transpose(&a, m, k), &b, &mut c, k, m, n);
        close(&c, &expect);

        let mut c = vec![1.0; m * n];
        matmul_nt(&a, &transpose(&b, k, n), &mut c, m, k, n, true);
        close(&c, &expect.iter().map(|v| v + 1.0).collect::<Vec<_>>());
    }
}
