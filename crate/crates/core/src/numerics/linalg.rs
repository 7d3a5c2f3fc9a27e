//! Dense Cholesky factorisation and triangular solves.

use super::instrument::add_ops;
use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Lower-triangular `L` with `L·Lᵀ = a` for symmetric positive-definite `a`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.shape() != [n, n] {
        return shape_err("cholesky", format!("expected square matrix, got {:?}", a.shape()));
    }
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = src[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = src[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    add_ops((n * n * n / 3) as u64);
    Tensor::raw(vec![n, n], l).checked("cholesky")
}

/// Solves `L·x = b` for lower-triangular `L` and vector `b`.
pub fn solve_lower(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let ld = l.data();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= ld[i * n + k] * x[k];
        }
        x[i] = s / ld[i * n + i];
    }
    add_ops((n * n / 2) as u64);
    x
}

/// Solves `Lᵀ·x = b` for lower-triangular `L` and vector `b`.
pub fn solve_lower_transposed(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let ld = l.data();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= ld[k * n + i] * x[k];
        }
        x[i] = s / ld[i * n + i];
    }
    add_ops((n * n / 2) as u64);
    x
}

/// `a⁻¹` from its Cholesky factor.
pub fn inverse_from_cholesky(l: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = solve_lower_transposed(l, &solve_lower(l, &e));
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Tensor::raw(vec![n, n], inv).checked("inverse_from_cholesky")
}

/// `log det a` from its Cholesky factor.
pub fn log_det_from_cholesky(l: &Tensor) -> f64 {
    let n = l.rows();
    (0..n).map(|i| l.data()[i * n + i].ln()).sum::<f64>() * 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd() -> Tensor {
        Tensor::from_rows(&[
            vec![4.0, 2.0, 0.4],
            vec![2.0, 5.0, 1.0],
            vec![0.4, 1.0, 3.0],
        ])
        .unwrap()
    }

    #[test]
    fn factor_reconstructs_input() {
        let a = spd();
        let l = cholesky(&a).unwrap();
        let back = l.matmul_nt(&l).unwrap();
        for (x, y) in a.data().iter().zip(back.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_and_log_det() {
        let a = spd();
        let l = cholesky(&a).unwrap();
        let inv = inverse_from_cholesky(&l).unwrap();
        let id = a.matmul(&inv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((id.at(i, j) - want).abs() < 1e-12);
            }
        }
        // det by cofactor expansion
        let d = |i: usize, j: usize| a.at(i, j);
        let det = d(0, 0) * (d(1, 1) * d(2, 2) - d(1, 2) * d(2, 1))
            - d(0, 1) * (d(1, 0) * d(2, 2) - d(1, 2) * d(2, 0))
            + d(0, 2) * (d(1, 0) * d(2, 1) - d(1, 1) * d(2, 0));
        assert!((log_det_from_cholesky(&l) - det.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }
}
